#ifndef IDPATCH_SAMPLER_HPP
#define IDPATCH_SAMPLER_HPP

#include <string>
#include <vector>

#include "idpatch/checkpoint.hpp"
#include "idpatch/condimage.hpp"
#include "idpatch/model.hpp"
#include "idpatch/synthid.hpp"

namespace idpatch {

struct GenerationRequest {
    std::vector<synthid::IdentityFeature> identities;
    std::vector<std::pair<int, int>> locations;
    int caption_label = 0;
    std::vector<synthid::KeypointChain> pose;  // optional pose condition
    uint64_t seed = 0;
    int steps     = 50;
    bool two_stage = true;
    double stage_boundary_fraction = 0.2;
    double guidance                = 3.0;
    // ablation switches; both default to the full method
    bool use_tokens  = true;
    bool use_patches = true;
};

struct GeneratedImage {
    Tensor pixels;  // [3,H,W] in [0,1]
    GenerationRequest request;
    double seconds = 0.0;
};

// Training timesteps visited by a strided K-step run: round(k*(T-1)/(K-1)).
std::vector<int> strided_timesteps(int total_timesteps, int steps);

// The conditioning image a request produces: projected patches over the pose
// base (or black canvas). Honors use_patches; shared by sample() and exports.
condimage::ConditioningImage build_request_conditioning(const GenerationRequest& req,
                                                        Model& model);

// One ancestral update x_{tau_k} -> x_{tau_{k-1}}; the final step (k_index 0)
// returns the predicted x0 with no added noise.
Tensor denoise_step(const Tensor& x_t, int k_index, const std::vector<int>& tau,
                    const Tensor& eps_hat, const diffusion::NoiseSchedule& sched, Rng& rng);

class Sampler {
public:
    // The model is treated as an immutable checkpoint; concurrent sample()
    // calls against one Sampler are safe.
    Sampler(Model& model, const CheckpointMeta& meta);

    GeneratedImage sample(const GenerationRequest& req) const;

    // Per-N mean wall-clock of sample() over `runs` repetitions, excluding
    // model loading and file I/O.
    struct TimingRow {
        int n_faces = 0;
        double mean_seconds = 0.0;
        std::vector<double> runs;
    };
    std::vector<TimingRow> benchmark_generation(const GenerationRequest& request_template,
                                                const std::vector<int>& n_values,
                                                int runs = 3) const;

    const ModelConfig& config() const { return model_->cfg; }
    const CheckpointMeta& meta() const { return meta_; }

private:
    Model* model_;
    CheckpointMeta meta_;
    diffusion::NoiseSchedule sched_;
};

}  // namespace idpatch

#endif  // IDPATCH_SAMPLER_HPP
