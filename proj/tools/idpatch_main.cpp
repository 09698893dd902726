// Command-line entry point: dataset generation, two-stage training, sampling,
// evaluation and timing benchmarks, all driven by one JSON run config.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "idpatch/checkpoint.hpp"
#include "idpatch/config.hpp"
#include "idpatch/errors.hpp"
#include "idpatch/evalkit.hpp"
#include "idpatch/sampler.hpp"
#include "idpatch/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace idpatch;

namespace {

TrainConfig make_train_config(const RunConfig& cfg, int stage) {
    TrainConfig tc;
    tc.stage           = stage;
    tc.batch_size      = cfg.train.batch_size;
    tc.lr              = cfg.train.lr;
    tc.weight_decay    = cfg.train.weight_decay;
    tc.text_drop_prob  = cfg.train.text_drop_prob;
    tc.seed            = cfg.seed;
    tc.manifest_path   = cfg.manifest_path();
    tc.threads         = cfg.train.threads;
    tc.log_every       = cfg.train.log_every;
    tc.model           = cfg.model;
    tc.run_config_hash = cfg.hash();
    switch (stage) {
        case 1:
            tc.steps   = cfg.train.steps_stage1;
            tc.out_dir = (fs::path(cfg.run_dir()) / "train_stage1").string();
            break;
        case 2:
            tc.steps   = cfg.train.steps_stage2;
            tc.out_dir = (fs::path(cfg.run_dir()) / "train_stage2").string();
            break;
        default:
            tc.steps   = cfg.single_stage_steps();
            tc.out_dir = (fs::path(cfg.run_dir()) / "train_single").string();
            break;
    }
    return tc;
}

int cmd_dataset(const std::string& config_path) {
    RunConfig cfg = load_run_config(config_path);
    auto manifest = synthid::build_dataset(cfg.dataset);
    std::cout << (fs::path(manifest.root_dir) / "manifest.jsonl").string() << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& stage_arg,
              std::string init_ckpt) {
    RunConfig cfg = load_run_config(config_path);
    int stage     = 0;
    if (stage_arg == "1") stage = 1;
    else if (stage_arg == "2") stage = 2;
    else if (stage_arg == "single") stage = 0;
    else throw ConfigError("--stage must be 1, 2 or single");

    TrainConfig tc = make_train_config(cfg, stage);
    if (stage == 2) {
        if (init_ckpt.empty())
            init_ckpt =
                (fs::path(cfg.run_dir()) / "train_stage1" / "ckpt_stage1.bin").string();
        if (!fs::exists(init_ckpt))
            throw PreconditionError("stage-1 checkpoint not found at '" + init_ckpt +
                                    "'; run `idpatch train --stage 1` first");
        tc.init_checkpoint = init_ckpt;
    }
    TrainResult result = run_training(tc);
    std::cout << result.checkpoint_path << "\n";
    return 0;
}

GenerationRequest request_from_json(const json& j, const RunConfig& cfg,
                                    const synthid::DatasetManifest* manifest) {
    GenerationRequest req;
    if (j.contains("labels")) {
        if (!manifest)
            throw PreconditionError("request uses identity labels but no dataset manifest exists");
        for (int lab : j.at("labels").get<std::vector<int>>()) {
            if (lab < 0 || lab >= static_cast<int>(manifest->identity_pool.size()))
                throw PreconditionError("request label out of pool range");
            req.identities.push_back(manifest->identity_pool[lab]);
        }
    } else if (j.contains("vectors")) {
        for (const auto& vec : j.at("vectors")) {
            synthid::IdentityFeature f;
            for (const auto& v : vec) f.values.push_back(v.get<float>());
            double nrm = f.norm();
            if (nrm < 1e-9) throw PreconditionError("request identity vector has zero norm");
            for (auto& v : f.values) v = static_cast<float>(v / nrm);
            req.identities.push_back(std::move(f));
        }
    } else {
        throw ConfigError("request needs either 'labels' or 'vectors'");
    }
    for (const auto& p : j.at("locations"))
        req.locations.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
    req.caption_label = j.value("caption_label", 0);
    req.seed          = j.value("seed", cfg.seed);
    req.steps         = j.value("steps", cfg.sample.steps);
    req.two_stage     = j.value("two_stage", cfg.sample.two_stage);
    req.stage_boundary_fraction =
        j.value("stage_boundary_fraction", cfg.sample.stage_boundary_fraction);
    req.guidance   = j.value("guidance", cfg.sample.guidance);
    req.use_tokens = j.value("use_tokens", true);
    req.use_patches = j.value("use_patches", true);
    if (j.contains("pose") && !j.at("pose").is_null()) {
        if (j.at("pose").is_string() && j.at("pose").get<std::string>() == "auto") {
            Rng rng(mix_seed({0x504f534555ULL, req.seed}));
            for (auto& [x, y] : req.locations) {
                auto chains = synthid::make_skeleton(x, y, cfg.dataset.sprite_size,
                                                     cfg.dataset.image_size,
                                                     cfg.dataset.image_size, rng);
                for (auto& c : chains) req.pose.push_back(std::move(c));
            }
        } else {
            for (const auto& chain : j.at("pose")) {
                synthid::KeypointChain kc;
                for (const auto& p : chain) kc.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
                req.pose.push_back(std::move(kc));
            }
        }
    }
    return req;
}

int cmd_sample(const std::string& config_path, const std::string& ckpt_path,
               const std::string& request_path, std::string out_dir) {
    RunConfig cfg = load_run_config(config_path);
    if (!fs::exists(ckpt_path)) throw PreconditionError("checkpoint not found: " + ckpt_path);
    std::ifstream rf(request_path, std::ios::binary);
    if (!rf) throw PreconditionError("request file not found: " + request_path);
    json jreq;
    try {
        rf >> jreq;
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("request file is not valid JSON: ") + e.what());
    }
    if (!jreq.is_array()) jreq = json::array({jreq});

    std::unique_ptr<synthid::DatasetManifest> manifest;
    if (fs::exists(cfg.manifest_path()))
        manifest = std::make_unique<synthid::DatasetManifest>(
            synthid::load_manifest(cfg.manifest_path(), /*validate_images=*/false));

    Model model;
    CheckpointMeta meta = load_checkpoint(ckpt_path, model);
    Sampler sampler(model, meta);

    if (out_dir.empty()) out_dir = (fs::path(cfg.run_dir()) / "samples").string();
    fs::create_directories(out_dir);

    for (size_t i = 0; i < jreq.size(); i++) {
        GenerationRequest req = request_from_json(jreq[i], cfg, manifest.get());
        GeneratedImage gen    = sampler.sample(req);
        char name[64];
        std::snprintf(name, sizeof(name), "sample_%03zu_seed%llu.ppm", i,
                      static_cast<unsigned long long>(req.seed));
        const std::string img_path = (fs::path(out_dir) / name).string();
        write_ppm(img_path, from_unit_tensor(gen.pixels));
        // the conditioning image the request produced, for inspection
        auto ci = build_request_conditioning(req, model);
        condimage::export_conditioning(ci, img_path + ".cond.ppm",
                                       img_path + ".placements.json");
        json side;
        side["request"]     = jreq[i];
        side["seed"]        = req.seed;
        side["seconds"]     = gen.seconds;
        side["image"]       = img_path;
        side["config_hash"] = cfg.hash();
        std::ofstream sf(img_path + ".json", std::ios::binary);
        sf << side.dump(2) << "\n";
        std::cout << img_path << "\n";
    }
    return 0;
}

evalkit::ProtocolConfig make_protocol_config(const RunConfig& cfg, const std::string& variant) {
    evalkit::ProtocolConfig pc;
    pc.styles = evalkit::default_styles(cfg.dataset.n_caption_labels, cfg.eval.n_values,
                                        cfg.eval.with_pose);
    pc.combos_per_style        = cfg.eval.combos_per_style;
    pc.crop_size               = cfg.eval.crop_size;
    pc.seed                    = cfg.seed;
    pc.threads                 = cfg.eval.threads;
    pc.steps                   = cfg.sample.steps;
    pc.guidance                = cfg.sample.guidance;
    pc.two_stage               = cfg.sample.two_stage;
    pc.stage_boundary_fraction = cfg.sample.stage_boundary_fraction;
    if (variant == "full") {
    } else if (variant == "no_tokens") {
        pc.use_tokens = false;
    } else if (variant == "no_patches") {
        pc.use_patches = false;
    } else if (variant == "single_stage_inference") {
        pc.two_stage = false;
    } else {
        throw ConfigError("unknown eval variant '" + variant + "'");
    }
    return pc;
}

int cmd_eval(const std::string& config_path, const std::string& ckpt_path,
             const std::string& variant, std::string out_dir) {
    RunConfig cfg = load_run_config(config_path);
    if (!fs::exists(ckpt_path)) throw PreconditionError("checkpoint not found: " + ckpt_path);
    auto manifest = synthid::load_manifest(cfg.manifest_path());
    Model model;
    CheckpointMeta meta = load_checkpoint(ckpt_path, model);
    Sampler sampler(model, meta);
    auto pc = make_protocol_config(cfg, variant);
    if (meta.stage == "stage1") pc.use_tokens = false;  // token head is untrained

    evalkit::EvalReport report = evalkit::run_protocol(sampler, manifest, pc);
    report.config_hash         = cfg.hash();
    report.variant             = variant;
    if (out_dir.empty()) out_dir = (fs::path(cfg.run_dir()) / ("eval-" + variant)).string();
    const auto paths = evalkit::emit_report(report, out_dir);

    // summary line in the run-wide metrics log, same JSONL format the trainer uses
    fs::create_directories(cfg.run_dir());
    std::ofstream log(fs::path(cfg.run_dir()) / "metrics.jsonl", std::ios::app);
    json line;
    line["type"]                 = "eval";
    line["variant"]              = variant;
    line["checkpoint_stage"]     = meta.stage;
    line["mean_resemblance"]     = report.aggregates.mean_resemblance;
    line["association_accuracy"] = report.aggregates.association_accuracy;
    line["mean_text_score"]      = report.aggregates.mean_text_score;
    line["mean_seconds"]         = report.aggregates.mean_seconds;
    log << line.dump() << "\n";

    for (const auto& p : paths) std::cout << p << "\n";
    return 0;
}

int cmd_bench(const std::string& config_path, const std::string& ckpt_path,
              const std::string& n_list, int runs, std::string out_dir) {
    RunConfig cfg = load_run_config(config_path);
    if (!fs::exists(ckpt_path)) throw PreconditionError("checkpoint not found: " + ckpt_path);
    std::vector<int> n_values;
    std::stringstream ss(n_list);
    for (std::string tok; std::getline(ss, tok, ',');)
        if (!tok.empty()) n_values.push_back(std::stoi(tok));

    Model model;
    CheckpointMeta meta = load_checkpoint(ckpt_path, model);
    Sampler sampler(model, meta);

    GenerationRequest tmpl;
    tmpl.steps                   = cfg.sample.steps;
    tmpl.guidance                = cfg.sample.guidance;
    tmpl.two_stage               = cfg.sample.two_stage;
    tmpl.stage_boundary_fraction = cfg.sample.stage_boundary_fraction;
    tmpl.seed                    = cfg.seed;
    if (meta.stage == "stage1") tmpl.use_tokens = false;

    const auto table = sampler.benchmark_generation(tmpl, n_values, runs);
    json j;
    j["config_hash"] = cfg.hash();
    j["rows"]        = json::array();
    for (const auto& row : table) {
        json r;
        r["n_faces"]      = row.n_faces;
        r["mean_seconds"] = row.mean_seconds;
        r["runs"]         = row.runs;
        j["rows"].push_back(r);
    }
    if (out_dir.empty()) out_dir = (fs::path(cfg.run_dir()) / "bench").string();
    fs::create_directories(out_dir);
    const std::string path = (fs::path(out_dir) / "timing.json").string();
    std::ofstream f(path, std::ios::binary);
    f << j.dump(2) << "\n";
    std::cout << path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ID-conditioned toy diffusion pipeline"};
    app.require_subcommand(1);

    std::string config_path, ckpt_path, request_path, out_dir, init_ckpt;
    std::string stage = "1", variant = "full", n_list = "1,2,4,8";
    int runs = 3;

    auto* sd = app.add_subcommand("dataset", "generate the synthetic dataset");
    sd->add_option("--config", config_path, "run config path")->required();

    auto* st = app.add_subcommand("train", "train a checkpoint");
    st->add_option("--config", config_path, "run config path")->required();
    st->add_option("--stage", stage, "1, 2 or single")->required();
    st->add_option("--init", init_ckpt, "init checkpoint (stage 2)");

    auto* ss = app.add_subcommand("sample", "generate images from a request file");
    ss->add_option("--config", config_path, "run config path")->required();
    ss->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    ss->add_option("--request", request_path, "request JSON path")->required();
    ss->add_option("--out", out_dir, "output directory");

    auto* se = app.add_subcommand("eval", "run the evaluation protocol");
    se->add_option("--config", config_path, "run config path")->required();
    se->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    se->add_option("--variant", variant, "full|no_tokens|no_patches|single_stage_inference");
    se->add_option("--out", out_dir, "output directory");

    auto* sb = app.add_subcommand("bench", "benchmark generation time vs face count");
    sb->add_option("--config", config_path, "run config path")->required();
    sb->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
    sb->add_option("--n-list", n_list, "comma-separated face counts");
    sb->add_option("--runs", runs, "repetitions per face count");
    sb->add_option("--out", out_dir, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (sd->parsed()) return cmd_dataset(config_path);
        if (st->parsed()) return cmd_train(config_path, stage, init_ckpt);
        if (ss->parsed()) return cmd_sample(config_path, ckpt_path, request_path, out_dir);
        if (se->parsed()) return cmd_eval(config_path, ckpt_path, variant, out_dir);
        if (sb->parsed()) return cmd_bench(config_path, ckpt_path, n_list, runs, out_dir);
    } catch (const ConfigError& e) {
        std::cerr << "error: config: " << e.what() << "\n";
        return 2;
    } catch (const PreconditionError& e) {
        std::cerr << "error: precondition: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: runtime: " << e.what() << "\n";
        return 4;
    }
    return 2;
}
