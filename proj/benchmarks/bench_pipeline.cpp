#include <benchmark/benchmark.h>

#include "idpatch/diffusion.hpp"
#include "idpatch/model.hpp"
#include "idpatch/sampler.hpp"
#include "idpatch/trainer.hpp"

using namespace idpatch;

namespace {

ModelConfig default_sized() { return ModelConfig{}; }

Model& shared_model() {
    static Model model = [] {
        Model m;
        m.build(default_sized(), 1);
        return m;
    }();
    return model;
}

void BM_DenoiserForward(benchmark::State& state) {
    Model& model = shared_model();
    const bool with_control = state.range(0) != 0;
    Rng rng(2);
    Tensor x({3, 128, 128}), cond({3, 128, 128});
    for (size_t i = 0; i < x.numel(); i++) x[i] = static_cast<float>(rng.normal());
    for (size_t i = 0; i < cond.numel(); i++) cond[i] = static_cast<float>(rng.uniform(-1, 1));
    for (auto _ : state) {
        Graph g;
        auto ctx = model.caption_tokens(g, 0);
        auto eps = model.denoise(g, g.input(x), 100,
                                 with_control ? g.input(cond) : NodeRef<float>{}, ctx);
        benchmark::DoNotOptimize(eps->val().data());
    }
}
BENCHMARK(BM_DenoiserForward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_ProjectorBothHeads(benchmark::State& state) {
    Model& model = shared_model();
    auto f       = synthid::sample_identity(5);
    for (auto _ : state) {
        Graph g;
        auto trunk = model.projector.trunk(g, model.feature_node(g, f));
        auto patch = model.projector.patch(g, trunk);
        auto toks  = model.projector.tokens(g, trunk);
        benchmark::DoNotOptimize(patch->val().data());
        benchmark::DoNotOptimize(toks->val().data());
    }
}
BENCHMARK(BM_ProjectorBothHeads);

void BM_SamplerStep(benchmark::State& state) {
    Model& model = shared_model();
    CheckpointMeta meta;
    meta.stage = "stage2";
    meta.model = model.cfg;
    Sampler sampler(model, meta);
    GenerationRequest req;
    req.identities = {synthid::sample_identity(1), synthid::sample_identity(2)};
    req.locations  = {{40, 64}, {90, 64}};
    req.steps      = 1;  // one denoising iteration with guidance = two forwards
    req.guidance   = 3.0;
    uint64_t seed  = 0;
    for (auto _ : state) {
        req.seed = seed++;
        auto out = sampler.sample(req);
        benchmark::DoNotOptimize(out.pixels.data());
    }
}
BENCHMARK(BM_SamplerStep)->Unit(benchmark::kMillisecond);

void BM_SceneGeneration(benchmark::State& state) {
    synthid::SceneParams params;
    std::vector<synthid::IdentityFeature> ids;
    std::vector<std::pair<int, int>> locs = {{30, 30}, {90, 30}, {30, 90}, {90, 90}};
    for (int i = 0; i < 4; i++) ids.push_back(synthid::sample_identity(i + 1));
    uint64_t seed = 0;
    for (auto _ : state) {
        auto scene = synthid::generate_scene(ids, locs, 2, params, true, seed++);
        benchmark::DoNotOptimize(scene.first.data());
    }
}
BENCHMARK(BM_SceneGeneration);

}  // namespace
