#include "idpatch/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "idpatch/errors.hpp"
#include "idpatch/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace idpatch {

namespace {

void collect_unknown_keys(const json& obj, const std::set<std::string>& allowed,
                          const std::string& prefix, std::vector<std::string>& bad) {
    for (auto& [key, val] : obj.items())
        if (!allowed.count(key)) bad.push_back(prefix.empty() ? key : prefix + "." + key);
}

template <typename T>
void maybe(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

}  // namespace

RunConfig run_config_from_json_text(const std::string& text) {
    return run_config_from_json_text_with_root(text, nullptr);
}

RunConfig run_config_from_json_text_with_root(const std::string& text,
                                              const char* out_root_override) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config root must be an object");

    std::vector<std::string> bad;
    collect_unknown_keys(j, {"seed", "out_root", "dataset", "model", "train", "sample", "eval"},
                         "", bad);

    RunConfig cfg;
    maybe(j, "seed", cfg.seed);
    maybe(j, "out_root", cfg.out_root);

    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        collect_unknown_keys(d,
                             {"count", "image_size", "sprite_size", "feature_dim", "n_identities",
                              "n_caption_labels", "n_max", "with_pose_fraction",
                              "holdout_combos_per_n", "out_dir"},
                             "dataset", bad);
        maybe(d, "count", cfg.dataset.count);
        maybe(d, "image_size", cfg.dataset.image_size);
        maybe(d, "sprite_size", cfg.dataset.sprite_size);
        maybe(d, "feature_dim", cfg.dataset.feature_dim);
        maybe(d, "n_identities", cfg.dataset.n_identities);
        maybe(d, "n_caption_labels", cfg.dataset.n_caption_labels);
        maybe(d, "n_max", cfg.dataset.n_max);
        maybe(d, "with_pose_fraction", cfg.dataset.with_pose_fraction);
        maybe(d, "holdout_combos_per_n", cfg.dataset.holdout_combos_per_n);
        maybe(d, "out_dir", cfg.dataset.out_dir);
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        collect_unknown_keys(m,
                             {"d_text", "d_model", "m_tokens", "n_in_tokens", "patch_size",
                              "text_len", "heads", "timesteps", "beta_min", "beta_max",
                              "temb_dim", "resampler_depth", "widths"},
                             "model", bad);
        maybe(m, "d_text", cfg.model.d_text);
        maybe(m, "d_model", cfg.model.d_model);
        maybe(m, "m_tokens", cfg.model.m_tokens);
        maybe(m, "n_in_tokens", cfg.model.n_in_tokens);
        maybe(m, "patch_size", cfg.model.patch_size);
        maybe(m, "text_len", cfg.model.text_len);
        maybe(m, "heads", cfg.model.heads);
        maybe(m, "timesteps", cfg.model.timesteps);
        maybe(m, "beta_min", cfg.model.beta_min);
        maybe(m, "beta_max", cfg.model.beta_max);
        maybe(m, "temb_dim", cfg.model.temb_dim);
        maybe(m, "resampler_depth", cfg.model.resampler_depth);
        if (m.contains("widths")) cfg.model.widths = m.at("widths").get<std::array<int, 3>>();
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        collect_unknown_keys(t,
                             {"steps_stage1", "steps_stage2", "steps_single", "batch_size", "lr",
                              "weight_decay", "text_drop_prob", "threads", "log_every"},
                             "train", bad);
        maybe(t, "steps_stage1", cfg.train.steps_stage1);
        maybe(t, "steps_stage2", cfg.train.steps_stage2);
        maybe(t, "steps_single", cfg.train.steps_single);
        maybe(t, "batch_size", cfg.train.batch_size);
        maybe(t, "lr", cfg.train.lr);
        maybe(t, "weight_decay", cfg.train.weight_decay);
        maybe(t, "text_drop_prob", cfg.train.text_drop_prob);
        maybe(t, "threads", cfg.train.threads);
        maybe(t, "log_every", cfg.train.log_every);
    }
    if (j.contains("sample")) {
        const json& s = j.at("sample");
        collect_unknown_keys(s, {"steps", "guidance", "two_stage", "stage_boundary_fraction"},
                             "sample", bad);
        maybe(s, "steps", cfg.sample.steps);
        maybe(s, "guidance", cfg.sample.guidance);
        maybe(s, "two_stage", cfg.sample.two_stage);
        maybe(s, "stage_boundary_fraction", cfg.sample.stage_boundary_fraction);
    }
    if (j.contains("eval")) {
        const json& e = j.at("eval");
        collect_unknown_keys(
            e, {"n_values", "combos_per_style", "crop_size", "with_pose", "threads", "bench_runs"},
            "eval", bad);
        if (e.contains("n_values")) cfg.eval.n_values = e.at("n_values").get<std::vector<int>>();
        maybe(e, "combos_per_style", cfg.eval.combos_per_style);
        maybe(e, "crop_size", cfg.eval.crop_size);
        maybe(e, "with_pose", cfg.eval.with_pose);
        maybe(e, "threads", cfg.eval.threads);
        maybe(e, "bench_runs", cfg.eval.bench_runs);
    }

    if (!bad.empty()) {
        std::ostringstream os;
        os << "unknown config keys:";
        for (const auto& k : bad) os << " " << k;
        throw ConfigError(os.str());
    }

    if (out_root_override && *out_root_override) cfg.out_root = out_root_override;

    // keep the derived fields coherent (before any hash-derived path is built)
    cfg.dataset.seed      = cfg.seed;
    cfg.model.feature_dim = cfg.dataset.feature_dim;
    cfg.model.n_labels    = cfg.dataset.n_caption_labels;
    cfg.model.img_size    = cfg.dataset.image_size;
    cfg.model.validate();
    if (cfg.eval.crop_size < 0) cfg.eval.crop_size = cfg.dataset.sprite_size;
    if (cfg.dataset.out_dir.empty()) cfg.dataset.out_dir = cfg.dataset_dir();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("config file not found: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return run_config_from_json_text_with_root(ss.str(), std::getenv("IDPATCH_OUT_ROOT"));
}

std::string RunConfig::canonical_json() const {
    json j;
    j["seed"]     = seed;
    j["out_root"] = out_root;
    j["dataset"]  = {{"count", dataset.count},
                     {"image_size", dataset.image_size},
                     {"sprite_size", dataset.sprite_size},
                     {"feature_dim", dataset.feature_dim},
                     {"n_identities", dataset.n_identities},
                     {"n_caption_labels", dataset.n_caption_labels},
                     {"n_max", dataset.n_max},
                     {"with_pose_fraction", dataset.with_pose_fraction},
                     {"holdout_combos_per_n", dataset.holdout_combos_per_n}};
    j["model"]    = json::parse(model.to_json_string());
    j["train"]    = {{"steps_stage1", train.steps_stage1},
                     {"steps_stage2", train.steps_stage2},
                     {"steps_single", train.steps_single},
                     {"batch_size", train.batch_size},
                     {"lr", train.lr},
                     {"weight_decay", train.weight_decay},
                     {"text_drop_prob", train.text_drop_prob}};
    j["sample"]   = {{"steps", sample.steps},
                     {"guidance", sample.guidance},
                     {"two_stage", sample.two_stage},
                     {"stage_boundary_fraction", sample.stage_boundary_fraction}};
    j["eval"]     = {{"n_values", eval.n_values},
                     {"combos_per_style", eval.combos_per_style},
                     {"crop_size", eval.crop_size},
                     {"with_pose", eval.with_pose}};
    return j.dump();
}

uint64_t RunConfig::hash() const {
    const std::string s = canonical_json();
    return fnv1a(s.data(), s.size());
}

std::string RunConfig::run_dir() const {
    char tag[16];
    std::snprintf(tag, sizeof(tag), "%08x", static_cast<uint32_t>(hash() & 0xffffffffu));
    return (fs::path(out_root) / (std::string("run-") + tag)).string();
}

std::string RunConfig::dataset_dir() const { return (fs::path(run_dir()) / "dataset").string(); }

std::string RunConfig::manifest_path() const {
    return (fs::path(dataset.out_dir.empty() ? dataset_dir() : dataset.out_dir) /
            "manifest.jsonl")
        .string();
}

}  // namespace idpatch
