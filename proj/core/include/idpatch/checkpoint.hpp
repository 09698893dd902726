#ifndef IDPATCH_CHECKPOINT_HPP
#define IDPATCH_CHECKPOINT_HPP

#include <cstdint>
#include <string>

#include "idpatch/model.hpp"

namespace idpatch {

inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    uint32_t format_version = kCheckpointVersion;
    std::string stage       = "init";  // init | stage1 | stage2 | single
    int64_t step            = 0;
    uint64_t seed           = 0;
    uint64_t config_hash    = 0;  // hash of the run config that produced it
    ModelConfig model;
};

// Versioned binary container with a checksum trailer; parameter payloads are
// raw little-endian float32, so save -> load round-trips bit-exactly.
void save_checkpoint(const std::string& path, Model& model, const CheckpointMeta& meta);

// Rebuilds the model from the stored config and loads every named parameter.
CheckpointMeta load_checkpoint(const std::string& path, Model& model);

// Header-only peek (no parameter payload validation beyond the checksum).
CheckpointMeta read_checkpoint_meta(const std::string& path);

}  // namespace idpatch

#endif  // IDPATCH_CHECKPOINT_HPP
