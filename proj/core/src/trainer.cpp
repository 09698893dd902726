#include "idpatch/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "idpatch/errors.hpp"
#include "idpatch/image.hpp"
#include "idpatch/parallel.hpp"

namespace fs = std::filesystem;

namespace idpatch {

namespace {
constexpr uint64_t kBatchTag = 0x5442415443480001ULL;
constexpr uint64_t kInitTag  = 0x54494e4954000001ULL;
}  // namespace

NodeRef<float> build_sample_loss(Graph& g, Model& model, const diffusion::NoiseSchedule& sched,
                                 const TrainSample& s) {
    const int hw = model.cfg.img_size;

    // conditioning image: projected patches over pose base or black canvas
    Tensor base({3, hw, hw});
    if (s.pose.empty()) {
        base.fill(-1.f);
    } else {
        base = condimage::rasterize_pose(s.pose, hw, hw).pixels;
    }
    std::vector<NodeRef<float>> patches;
    std::vector<NodeRef<float>> token_blocks;
    for (const auto& idf : s.identities) {
        auto trunk_out = model.projector.trunk(g, model.feature_node(g, idf));
        patches.push_back(model.projector.patch(g, trunk_out));
        if (s.use_tokens) token_blocks.push_back(model.projector.tokens(g, trunk_out));
    }
    NodeRef<float> cond;
    if (patches.empty()) {
        cond = g.input(base);
    } else {
        cond = condimage::place_patches(g, base, patches, s.locations);
    }

    auto text       = model.caption_tokens(g, s.caption_label);
    auto [ctx, seg] = diffusion::extend_embeddings_g(g, text, token_blocks);

    Tensor x_t = diffusion::add_noise(s.x0, s.t, s.eps, sched);
    auto eps_hat = model.denoise(g, g.input(std::move(x_t)), s.t, cond, ctx);
    return ops::mse(g, eps_hat, g.input(s.eps));
}

TrainSample make_train_sample(const synthid::DatasetManifest& manifest,
                              const std::vector<Tensor>& images_signed, const ModelConfig& mc,
                              uint64_t seed, int step, int slot, double text_drop_prob,
                              bool use_tokens) {
    Rng rng(mix_seed({kBatchTag, seed, static_cast<uint64_t>(step),
                      static_cast<uint64_t>(slot)}));
    const size_t idx = rng.below(manifest.records.size());
    const auto& rec  = manifest.records[idx];

    TrainSample s;
    s.x0         = images_signed[idx];
    s.t          = static_cast<int>(rng.below(static_cast<uint64_t>(mc.timesteps)));
    s.eps        = Tensor({3, mc.img_size, mc.img_size});
    for (size_t i = 0; i < s.eps.numel(); i++) s.eps[i] = static_cast<float>(rng.normal());
    const bool drop = rng.uniform() < text_drop_prob;
    s.caption_label = drop ? mc.n_labels : rec.annotation.caption_label;
    s.identities    = rec.annotation.identities;
    s.locations     = rec.annotation.locations;
    s.pose          = rec.annotation.pose_skeletons;
    s.use_tokens    = use_tokens;
    return s;
}

namespace {

struct LoadedDataset {
    synthid::DatasetManifest manifest;
    std::vector<Tensor> images_signed;
};

LoadedDataset load_dataset(const std::string& manifest_path, const ModelConfig& mc) {
    LoadedDataset out;
    out.manifest = synthid::load_manifest(manifest_path);
    if (out.manifest.records.empty())
        throw PreconditionError("dataset is empty: " + manifest_path);
    if (out.manifest.config.image_size != mc.img_size)
        throw ConfigError("dataset image size does not match model.img_size");
    if (out.manifest.config.feature_dim != mc.feature_dim)
        throw ConfigError("dataset feature_dim does not match model.feature_dim");
    if (out.manifest.config.n_caption_labels > mc.n_labels)
        throw ConfigError("dataset has more caption labels than model.n_labels");
    out.images_signed.reserve(out.manifest.records.size());
    for (const auto& rec : out.manifest.records)
        out.images_signed.push_back(to_signed_tensor(
            read_ppm((fs::path(out.manifest.root_dir) / rec.image_path).string())));
    return out;
}

void set_token_head_trainable(Model& model, bool trainable) {
    model.projector.token_head.w->trainable = trainable;
    model.projector.token_head.b->trainable = trainable;
}

struct MetricsLog {
    std::ofstream f;
    explicit MetricsLog(const std::string& path) : f(path, std::ios::app) {
        if (!f) throw RuntimeFailure("cannot open metrics log: " + path);
    }
    void line(const nlohmann::json& j) { f << j.dump() << "\n" << std::flush; }
};

TrainResult train_loop(const TrainConfig& cfg, Model& model, const std::string& stage_name,
                       bool use_tokens) {
    if (cfg.steps < 0) throw ConfigError("train.steps must be >= 0");
    if (cfg.batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (cfg.out_dir.empty()) throw ConfigError("train.out_dir must be set");
    fs::create_directories(cfg.out_dir);

    LoadedDataset data = load_dataset(cfg.manifest_path, cfg.model);
    const auto sched   = diffusion::make_schedule(cfg.model.timesteps, cfg.model.beta_min,
                                                  cfg.model.beta_max);

    nn::AdamWT<float>::Options opt;
    opt.lr           = cfg.lr;
    opt.weight_decay = cfg.weight_decay;
    opt.total_steps  = cfg.steps;
    nn::AdamWT<float> optimizer(model.params, opt);

    MetricsLog log((fs::path(cfg.out_dir) / "metrics.jsonl").string());
    {
        nlohmann::json j;
        j["type"]       = "start";
        j["stage"]      = stage_name;
        j["steps"]      = cfg.steps;
        j["batch_size"] = cfg.batch_size;
        j["records"]    = data.manifest.records.size();
        j["params"]     = model.params.size();
        j["elements"]   = model.params.total_elements();
        log.line(j);
    }

    TrainResult result;
    result.loss_trace.reserve(cfg.steps);

    const size_t n_params = model.params.size();
    std::vector<std::vector<Tensor>> slot_grads(cfg.batch_size);
    std::vector<double> slot_loss(cfg.batch_size);

    for (int step = 0; step < cfg.steps; step++) {
        for (auto& sg : slot_grads) sg.assign(n_params, Tensor());

        parallel_for(cfg.batch_size, cfg.threads, [&](int slot) {
            TrainSample s = make_train_sample(data.manifest, data.images_signed, cfg.model,
                                              cfg.seed, step, slot, cfg.text_drop_prob,
                                              use_tokens);
            Graph g;
            auto loss = build_sample_loss(g, model, sched, s);
            g.backward(loss);
            slot_loss[slot] = loss->val()[0];
            for (size_t i = 0; i < n_params; i++) {
                const Tensor* grad = g.grad_for(model.params[i]);
                if (grad) slot_grads[slot][i] = *grad;
            }
        });

        // deterministic reduction in slot order
        double batch_loss = 0.0;
        std::vector<Tensor> grads(n_params);
        const float inv_b = 1.0f / static_cast<float>(cfg.batch_size);
        for (int slot = 0; slot < cfg.batch_size; slot++) {
            batch_loss += slot_loss[slot];
            for (size_t i = 0; i < n_params; i++) {
                if (slot_grads[slot][i].empty()) continue;
                if (grads[i].empty()) grads[i] = Tensor(slot_grads[slot][i].shape());
                for (size_t j = 0; j < grads[i].numel(); j++)
                    grads[i][j] += slot_grads[slot][i][j] * inv_b;
            }
        }
        batch_loss /= cfg.batch_size;
        if (!std::isfinite(batch_loss))
            throw NumericalError("training diverged at step " + std::to_string(step) +
                                 " (loss is not finite)");
        optimizer.step(grads);
        result.loss_trace.push_back(batch_loss);

        if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) {
            nlohmann::json j;
            j["stage"] = stage_name;
            j["step"]  = step;
            j["loss"]  = batch_loss;
            j["lr"]    = optimizer.lr_at(step);
            log.line(j);
        }
    }

    CheckpointMeta meta;
    meta.stage       = stage_name;
    meta.step        = cfg.steps;
    meta.seed        = cfg.seed;
    meta.config_hash = cfg.run_config_hash;
    meta.model       = cfg.model;
    result.checkpoint_path = (fs::path(cfg.out_dir) / ("ckpt_" + stage_name + ".bin")).string();
    save_checkpoint(result.checkpoint_path, model, meta);
    return result;
}

}  // namespace

TrainResult train_stage1(const TrainConfig& cfg) {
    Model model;
    model.build(cfg.model, mix_seed({kInitTag, cfg.seed}));
    // token head exists but is frozen; its output never enters the stage-1 graph
    set_token_head_trainable(model, false);
    auto result = train_loop(cfg, model, "stage1", /*use_tokens=*/false);
    set_token_head_trainable(model, true);
    return result;
}

TrainResult train_stage2(const TrainConfig& cfg) {
    if (cfg.init_checkpoint.empty())
        throw PreconditionError("stage 2 requires an init checkpoint (train.init_checkpoint)");
    Model model;
    CheckpointMeta init = load_checkpoint(cfg.init_checkpoint, model);
    if (init.stage != "stage1" && init.stage != "stage2")
        throw PreconditionError("stage 2 must start from a stage1 or stage2 checkpoint, got '" +
                                init.stage + "'");
    if (!(init.model == cfg.model))
        throw ConfigError("init checkpoint model config does not match train.model");
    return train_loop(cfg, model, "stage2", /*use_tokens=*/true);
}

TrainResult train_single_stage(const TrainConfig& cfg) {
    Model model;
    model.build(cfg.model, mix_seed({kInitTag, cfg.seed}));
    return train_loop(cfg, model, "single", /*use_tokens=*/true);
}

TrainResult run_training(const TrainConfig& cfg) {
    switch (cfg.stage) {
        case 1: return train_stage1(cfg);
        case 2: return train_stage2(cfg);
        case 0: return train_single_stage(cfg);
        default: throw ConfigError("train.stage must be 1, 2 or 0 (single)");
    }
}

}  // namespace idpatch
