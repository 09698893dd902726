#ifndef IDPATCH_TRAINER_HPP
#define IDPATCH_TRAINER_HPP

#include <string>
#include <vector>

#include "idpatch/checkpoint.hpp"
#include "idpatch/condimage.hpp"
#include "idpatch/model.hpp"
#include "idpatch/synthid.hpp"

namespace idpatch {

struct TrainConfig {
    int stage             = 1;  // 1, 2, or 0 for single-stage
    int steps             = 1200;
    int batch_size        = 4;
    double lr             = 1e-4;
    double weight_decay   = 0.01;
    double text_drop_prob = 0.1;
    uint64_t seed         = 1;
    std::string manifest_path;
    std::string init_checkpoint;  // required for stage 2
    int threads   = 2;
    int log_every = 25;
    std::string out_dir;
    uint64_t run_config_hash = 0;
    ModelConfig model;
};

struct TrainResult {
    std::string checkpoint_path;
    std::vector<double> loss_trace;  // per-step batch loss
};

// One fully assembled training example.
struct TrainSample {
    Tensor x0;  // [3,H,W] in [-1,1]
    int t = 0;
    Tensor eps;  // [3,H,W]
    int caption_label = 0;
    std::vector<synthid::IdentityFeature> identities;
    std::vector<std::pair<int, int>> locations;
    std::vector<synthid::KeypointChain> pose;  // empty = black canvas base
    bool use_tokens = true;  // false during stage 1
};

// Differentiable pipeline for one sample: patches are projected and placed on
// the conditioning canvas, token blocks (when enabled) extend the caption
// tokens, and the loss is ||eps - eps_theta(x_t, t, I, c')||^2 / numel.
NodeRef<float> build_sample_loss(Graph& g, Model& model, const diffusion::NoiseSchedule& sched,
                                 const TrainSample& sample);

// Deterministic batch assembly: sample index, timestep, noise and text drop
// all derive from (seed, step, slot).
TrainSample make_train_sample(const synthid::DatasetManifest& manifest,
                              const std::vector<Tensor>& images_signed, const ModelConfig& mc,
                              uint64_t seed, int step, int slot, double text_drop_prob,
                              bool use_tokens);

TrainResult train_stage1(const TrainConfig& cfg);
TrainResult train_stage2(const TrainConfig& cfg);        // cfg.init_checkpoint must be set
TrainResult train_single_stage(const TrainConfig& cfg);  // both paths live from step 0

// Shared entry point dispatching on cfg.stage.
TrainResult run_training(const TrainConfig& cfg);

}  // namespace idpatch

#endif  // IDPATCH_TRAINER_HPP
