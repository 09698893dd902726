#include "idpatch/sampler.hpp"

#include <chrono>
#include <cmath>

#include "idpatch/errors.hpp"

namespace idpatch {

std::vector<int> strided_timesteps(int total_timesteps, int steps) {
    if (steps < 1) throw PreconditionError("sampler steps must be >= 1");
    if (steps > total_timesteps) steps = total_timesteps;
    std::vector<int> tau(steps);
    if (steps == 1) {
        tau[0] = total_timesteps - 1;
        return tau;
    }
    for (int k = 0; k < steps; k++)
        tau[k] = static_cast<int>(std::lround(static_cast<double>(k) * (total_timesteps - 1) /
                                              (steps - 1)));
    return tau;
}

Tensor denoise_step(const Tensor& x_t, int k_index, const std::vector<int>& tau,
                    const Tensor& eps_hat, const diffusion::NoiseSchedule& sched, Rng& rng) {
    if (k_index < 0 || k_index >= static_cast<int>(tau.size()))
        throw PreconditionError("denoise_step: step index out of range");
    if (!x_t.same_shape(eps_hat)) throw ShapeError("denoise_step: shape mismatch");
    if (!x_t.all_finite()) throw NumericalError("denoise_step: non-finite x_t");
    if (!eps_hat.all_finite()) throw NumericalError("denoise_step: non-finite eps prediction");

    const double abar_t = sched.alpha_bars[tau[k_index]];
    const double sq_a   = std::sqrt(abar_t);
    const double sq_1a  = std::sqrt(1.0 - abar_t);

    Tensor x0_hat(x_t.shape());
    for (size_t i = 0; i < x_t.numel(); i++) {
        // predicted clean image, clamped to the data range
        double v = (x_t[i] - sq_1a * eps_hat[i]) / sq_a;
        x0_hat[i] = static_cast<float>(std::clamp(v, -1.0, 1.0));
    }
    if (k_index == 0) return x0_hat;

    const double abar_p = sched.alpha_bars[tau[k_index - 1]];
    const double var    = (1.0 - abar_p) / (1.0 - abar_t) * (1.0 - abar_t / abar_p);
    const double sigma  = std::sqrt(std::max(0.0, var));
    const double dir    = std::sqrt(std::max(0.0, 1.0 - abar_p - var));
    const double sq_ap  = std::sqrt(abar_p);

    Tensor out(x_t.shape());
    for (size_t i = 0; i < x_t.numel(); i++) {
        const double mean = sq_ap * x0_hat[i] + dir * eps_hat[i];
        out[i] = static_cast<float>(mean + sigma * rng.normal());
    }
    return out;
}

Sampler::Sampler(Model& model, const CheckpointMeta& meta)
    : model_(&model),
      meta_(meta),
      sched_(diffusion::make_schedule(meta.model.timesteps, meta.model.beta_min,
                                      meta.model.beta_max)) {
    if (!(meta.model == model.cfg))
        throw ConfigError("sampler: checkpoint/model config mismatch");
}

namespace {

void validate_request(const GenerationRequest& req, const ModelConfig& mc,
                      const std::string& stage) {
    if (req.identities.size() != req.locations.size())
        throw PreconditionError("request: identities/locations length mismatch");
    for (size_t i = 0; i < req.locations.size(); i++) {
        auto [x, y] = req.locations[i];
        if (x < 0 || x >= mc.img_size || y < 0 || y >= mc.img_size)
            throw PreconditionError("request: location " + std::to_string(i) + " out of bounds");
    }
    for (const auto& f : req.identities)
        if (f.dim() != mc.feature_dim)
            throw PreconditionError("request: identity feature dim mismatch");
    if (req.steps < 1) throw PreconditionError("request: steps must be >= 1");
    if (req.stage_boundary_fraction < 0.0 || req.stage_boundary_fraction > 1.0)
        throw PreconditionError("request: stage_boundary_fraction must be in [0,1]");
    if (req.caption_label < 0 || req.caption_label >= mc.n_labels)
        throw PreconditionError("request: caption label out of range");
    if (req.use_tokens && !req.identities.empty() && stage == "stage1")
        throw PreconditionError(
            "stage-1 checkpoint has untrained ID tokens; set use_tokens=false");
}

}  // namespace

condimage::ConditioningImage build_request_conditioning(const GenerationRequest& req,
                                                        Model& model) {
    const ModelConfig& mc = model.cfg;
    condimage::PoseImage base;
    if (req.pose.empty()) {
        base.pixels = Tensor({3, mc.img_size, mc.img_size});
        base.pixels.fill(-1.f);
    } else {
        base = condimage::rasterize_pose(req.pose, mc.img_size, mc.img_size);
    }
    if (!req.use_patches || req.identities.empty()) {
        condimage::ConditioningImage ci;
        ci.pixels = std::move(base.pixels);
        return ci;
    }
    std::vector<Tensor> patches;
    for (const auto& idf : req.identities) patches.push_back(model.project_patch(idf));
    return condimage::compose_canvas(patches, req.locations, mc.img_size, mc.img_size, &base);
}

GeneratedImage Sampler::sample(const GenerationRequest& req) const {
    const ModelConfig& mc = model_->cfg;
    validate_request(req, mc, meta_.stage);
    const auto t0 = std::chrono::steady_clock::now();

    // identity token blocks, projected once per request
    std::vector<Tensor> token_blocks;
    if (req.use_tokens)
        for (const auto& idf : req.identities) token_blocks.push_back(model_->project_tokens(idf));

    // conditioning image is fixed for the whole trajectory
    Tensor cond = build_request_conditioning(req, *model_).pixels;

    const auto tau  = strided_timesteps(mc.timesteps, req.steps);
    const int kk    = static_cast<int>(tau.size());
    const int withheld =
        req.two_stage ? static_cast<int>(std::floor(req.stage_boundary_fraction * kk)) : 0;

    Rng rng(mix_seed({0x53414d504c450001ULL, req.seed}));
    Tensor x({3, mc.img_size, mc.img_size});
    for (size_t i = 0; i < x.numel(); i++) x[i] = static_cast<float>(rng.normal());

    for (int k = kk - 1; k >= 0; k--) {
        const int iteration = kk - 1 - k;  // 0 = first (noisiest) iteration
        const bool tokens_on = req.use_tokens && !token_blocks.empty() && iteration >= withheld;

        auto predict = [&](int label) {
            Graph g;
            auto text = model_->caption_tokens(g, label);
            std::vector<NodeRef<float>> blocks;
            if (tokens_on)
                for (const auto& blk : token_blocks) blocks.push_back(g.input(blk));
            auto [ctx, seg] = diffusion::extend_embeddings_g(g, text, blocks);
            auto eps = model_->denoise(g, g.input(x), tau[k], g.input(cond), ctx);
            return eps->val();
        };

        Tensor eps_hat = predict(req.caption_label);
        if (req.guidance != 1.0) {
            Tensor eps_u = predict(model_->null_label());
            for (size_t i = 0; i < eps_hat.numel(); i++)
                eps_hat[i] = static_cast<float>(eps_u[i] +
                                                req.guidance * (eps_hat[i] - eps_u[i]));
        }
        x = denoise_step(x, k, tau, eps_hat, sched_, rng);
    }

    GeneratedImage out;
    out.pixels = Tensor({3, mc.img_size, mc.img_size});
    for (size_t i = 0; i < x.numel(); i++)
        out.pixels[i] = (std::clamp(x[i], -1.f, 1.f) + 1.f) * 0.5f;
    out.request = req;
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

std::vector<Sampler::TimingRow> Sampler::benchmark_generation(
    const GenerationRequest& request_template, const std::vector<int>& n_values, int runs) const {
    std::vector<TimingRow> table;
    const int hw = model_->cfg.img_size;
    for (int n : n_values) {
        TimingRow row;
        row.n_faces = n;
        for (int r = 0; r < runs; r++) {
            GenerationRequest req = request_template;
            req.seed              = mix_seed({request_template.seed, static_cast<uint64_t>(n),
                                              static_cast<uint64_t>(r)});
            req.identities.clear();
            req.locations.clear();
            req.pose.clear();
            // fixed grid layout: sprite-sized cells left to right, top to bottom
            const int s    = model_->cfg.patch_size * 2;
            const int cols = std::max(1, hw / s);
            for (int i = 0; i < n; i++) {
                req.identities.push_back(synthid::sample_identity(
                    mix_seed({0xBE7Cu, static_cast<uint64_t>(i)}), model_->cfg.feature_dim));
                const int cx = s / 2 + (i % cols) * s;
                const int cy = s / 2 + (i / cols) * s;
                req.locations.emplace_back(std::min(cx, hw - 1), std::min(cy, hw - 1));
            }
            row.runs.push_back(sample(req).seconds);
        }
        double sum = 0.0;
        for (double v : row.runs) sum += v;
        row.mean_seconds = row.runs.empty() ? 0.0 : sum / row.runs.size();
        table.push_back(std::move(row));
    }
    return table;
}

}  // namespace idpatch
