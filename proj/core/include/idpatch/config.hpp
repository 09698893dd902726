#ifndef IDPATCH_CONFIG_HPP
#define IDPATCH_CONFIG_HPP

#include <string>
#include <vector>

#include "idpatch/model.hpp"
#include "idpatch/synthid.hpp"

namespace idpatch {

// One structured run-config document drives every CLI command. Unknown keys
// are rejected (all offenders listed); flags override config keys.
struct RunConfig {
    uint64_t seed        = 1;
    std::string out_root = "runs/default";

    synthid::DatasetConfig dataset;
    ModelConfig model;

    struct TrainSection {
        int steps_stage1      = 1200;
        int steps_stage2      = 1200;
        int steps_single      = -1;  // -1: stage1 + stage2 budget
        int batch_size        = 4;
        double lr             = 1e-4;
        double weight_decay   = 0.01;
        double text_drop_prob = 0.1;
        int threads           = 2;
        int log_every         = 25;
    } train;

    struct SampleSection {
        int steps                      = 50;
        double guidance                = 3.0;
        bool two_stage                 = true;
        double stage_boundary_fraction = 0.2;
    } sample;

    struct EvalSection {
        std::vector<int> n_values = {2, 3};
        int combos_per_style      = 4;
        int crop_size             = -1;  // -1: dataset.sprite_size
        bool with_pose            = false;
        int threads               = 2;
        int bench_runs            = 3;
    } eval;

    uint64_t hash() const;
    std::string canonical_json() const;

    // out_root with the config hash embedded: <out_root>/run-<hash8>
    std::string run_dir() const;
    std::string dataset_dir() const;
    std::string manifest_path() const;

    int single_stage_steps() const {
        return train.steps_single >= 0 ? train.steps_single
                                       : train.steps_stage1 + train.steps_stage2;
    }
};

// Parses and validates; environment variable IDPATCH_OUT_ROOT overrides
// out_root when set.
RunConfig load_run_config(const std::string& path);

RunConfig run_config_from_json_text(const std::string& text);
RunConfig run_config_from_json_text_with_root(const std::string& text,
                                              const char* out_root_override);

}  // namespace idpatch

#endif  // IDPATCH_CONFIG_HPP
