#include "idpatch/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "idpatch/errors.hpp"
#include "idpatch/rng.hpp"

using nlohmann::json;

namespace idpatch {

namespace {

constexpr char kMagic[4] = {'I', 'D', 'P', 'C'};

struct HashingWriter {
    std::ofstream f;
    uint64_t hash = 0xcbf29ce484222325ULL;

    explicit HashingWriter(const std::string& path) : f(path, std::ios::binary) {
        if (!f) throw RuntimeFailure("cannot open checkpoint for writing: " + path);
    }
    void write(const void* data, size_t n) {
        f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
        hash = fnv1a(data, n, hash);
    }
    template <typename T>
    void write_pod(T v) {
        write(&v, sizeof(T));
    }
};

struct HashingReader {
    std::ifstream f;
    uint64_t hash = 0xcbf29ce484222325ULL;
    std::string path;

    explicit HashingReader(const std::string& p) : f(p, std::ios::binary), path(p) {
        if (!f) throw PreconditionError("checkpoint not found: " + p);
    }
    void read(void* data, size_t n) {
        f.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
        if (f.gcount() != static_cast<std::streamsize>(n))
            throw RuntimeFailure("corrupt checkpoint (truncated): " + path);
        hash = fnv1a(data, n, hash);
    }
    template <typename T>
    T read_pod() {
        T v{};
        read(&v, sizeof(T));
        return v;
    }
};

json meta_to_json(const CheckpointMeta& meta, const Model& model) {
    json j;
    j["stage"]       = meta.stage;
    j["step"]        = meta.step;
    j["seed"]        = meta.seed;
    j["config_hash"] = meta.config_hash;
    j["model"]       = json::parse(meta.model.to_json_string());
    j["param_count"] = model.params.total_elements();
    return j;
}

}  // namespace

void save_checkpoint(const std::string& path, Model& model, const CheckpointMeta& meta_in) {
    CheckpointMeta meta = meta_in;
    meta.model          = model.cfg;  // the model is the authority on its own config
    HashingWriter w(path);
    w.write(kMagic, 4);
    w.write_pod<uint32_t>(kCheckpointVersion);
    const std::string header = meta_to_json(meta, model).dump();
    w.write_pod<uint64_t>(header.size());
    w.write(header.data(), header.size());
    w.write_pod<uint32_t>(static_cast<uint32_t>(model.params.size()));
    for (auto& p : model.params) {
        w.write_pod<uint16_t>(static_cast<uint16_t>(p.name.size()));
        w.write(p.name.data(), p.name.size());
        w.write_pod<uint8_t>(static_cast<uint8_t>(p.value.rank()));
        for (int d = 0; d < p.value.rank(); d++) w.write_pod<uint32_t>(p.value.dim(d));
        w.write_pod<uint64_t>(p.value.numel() * sizeof(float));
        w.write(p.value.data(), p.value.numel() * sizeof(float));
    }
    const uint64_t checksum = w.hash;
    w.f.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
    if (!w.f) throw RuntimeFailure("checkpoint write failed: " + path);
}

namespace {

CheckpointMeta read_header(HashingReader& r) {
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw RuntimeFailure("not a checkpoint file: " + r.path);
    const uint32_t version = r.read_pod<uint32_t>();
    if (version > kCheckpointVersion)
        throw RuntimeFailure("checkpoint version " + std::to_string(version) +
                             " not supported (max " + std::to_string(kCheckpointVersion) + ")");
    const uint64_t hlen = r.read_pod<uint64_t>();
    if (hlen > (1ULL << 20)) throw RuntimeFailure("corrupt checkpoint (header): " + r.path);
    std::string header(hlen, '\0');
    r.read(header.data(), hlen);
    json j = json::parse(header);
    CheckpointMeta meta;
    meta.format_version = version;
    meta.stage          = j.at("stage").get<std::string>();
    meta.step           = j.at("step").get<int64_t>();
    meta.seed           = j.at("seed").get<uint64_t>();
    meta.config_hash    = j.at("config_hash").get<uint64_t>();
    meta.model          = ModelConfig::from_json_string(j.at("model").dump());
    return meta;
}

}  // namespace

CheckpointMeta load_checkpoint(const std::string& path, Model& model) {
    HashingReader r(path);
    CheckpointMeta meta = read_header(r);
    model.build(meta.model, /*init_seed=*/meta.seed);
    const uint32_t n_params = r.read_pod<uint32_t>();
    if (n_params != model.params.size())
        throw RuntimeFailure("checkpoint parameter list mismatch: " + path);
    for (uint32_t i = 0; i < n_params; i++) {
        const uint16_t nlen = r.read_pod<uint16_t>();
        std::string name(nlen, '\0');
        r.read(name.data(), nlen);
        ParamT<float>* p = model.params.find(name);
        if (!p) throw RuntimeFailure("checkpoint has unknown parameter '" + name + "'");
        const uint8_t ndim = r.read_pod<uint8_t>();
        std::vector<int> dims(ndim);
        for (int d = 0; d < ndim; d++) dims[d] = static_cast<int>(r.read_pod<uint32_t>());
        if (dims != p->value.shape())
            throw RuntimeFailure("checkpoint shape mismatch for '" + name + "'");
        const uint64_t nbytes = r.read_pod<uint64_t>();
        if (nbytes != p->value.numel() * sizeof(float))
            throw RuntimeFailure("checkpoint size mismatch for '" + name + "'");
        r.read(p->value.data(), nbytes);
    }
    const uint64_t computed = r.hash;
    uint64_t stored         = 0;
    r.f.read(reinterpret_cast<char*>(&stored), sizeof(stored));
    if (r.f.gcount() != sizeof(stored) || stored != computed)
        throw RuntimeFailure("corrupt checkpoint (checksum): " + path);
    return meta;
}

CheckpointMeta read_checkpoint_meta(const std::string& path) {
    HashingReader r(path);
    return read_header(r);
}

}  // namespace idpatch
