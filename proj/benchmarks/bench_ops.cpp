#include <benchmark/benchmark.h>

#include "idpatch/graph.hpp"
#include "idpatch/nn.hpp"
#include "idpatch/rng.hpp"

using namespace idpatch;

namespace {

Tensor randn(std::vector<int> shape, uint64_t seed) {
    Rng rng(seed);
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.numel(); i++) t[i] = static_cast<float>(rng.normal());
    return t;
}

void BM_Conv2dForward(benchmark::State& state) {
    const int c  = static_cast<int>(state.range(0));
    const int hw = static_cast<int>(state.range(1));
    nn::ParamSetT<float> ps;
    Rng rng(1);
    auto& w  = ps.add_normal("w", {c, c, 3, 3}, rng, 0.05);
    auto& b  = ps.add_const("b", {c}, 0.f);
    Tensor x = randn({c, hw, hw}, 2);
    for (auto _ : state) {
        Graph g;
        auto y = ops::conv2d(g, g.input(x), g.leaf(w), g.leaf(b), 1, 1);
        benchmark::DoNotOptimize(y->val().data());
    }
    const double macs = 2.0 * c * c * 9.0 * hw * hw;
    state.counters["GFLOPS"] =
        benchmark::Counter(macs, benchmark::Counter::kIsIterationInvariantRate,
                           benchmark::Counter::kIs1000);
}
BENCHMARK(BM_Conv2dForward)->Args({32, 128})->Args({64, 64})->Args({128, 32});

void BM_Conv2dTrainStep(benchmark::State& state) {
    const int c  = static_cast<int>(state.range(0));
    const int hw = static_cast<int>(state.range(1));
    nn::ParamSetT<float> ps;
    Rng rng(1);
    auto& w       = ps.add_normal("w", {c, c, 3, 3}, rng, 0.05);
    auto& b       = ps.add_const("b", {c}, 0.f);
    Tensor x      = randn({c, hw, hw}, 2);
    Tensor target = randn({c, hw, hw}, 3);
    for (auto _ : state) {
        Graph g;
        auto y = ops::conv2d(g, g.input(x), g.leaf(w), g.leaf(b), 1, 1);
        auto l = ops::mse(g, y, g.input(target));
        g.backward(l);
        benchmark::DoNotOptimize(g.grad_for(w));
    }
}
BENCHMARK(BM_Conv2dTrainStep)->Args({32, 128})->Args({128, 32});

void BM_CrossAttention(benchmark::State& state) {
    const int tokens = static_cast<int>(state.range(0));
    nn::ParamSetT<float> ps;
    Rng rng(1);
    nn::CrossAttentionT<float> attn;
    attn.build(ps, "attn", 64, 128, 4, rng);
    Tensor x   = randn({tokens, 64}, 2);
    Tensor ctx = randn({40, 128}, 3);
    for (auto _ : state) {
        Graph g;
        auto y = attn.fwd(g, g.input(x), g.input(ctx));
        benchmark::DoNotOptimize(y->val().data());
    }
}
BENCHMARK(BM_CrossAttention)->Arg(1024)->Arg(4096);

void BM_GroupNorm(benchmark::State& state) {
    nn::ParamSetT<float> ps;
    auto& gamma = ps.add_const("g", {64}, 1.f);
    auto& beta  = ps.add_const("b", {64}, 0.f);
    Tensor x    = randn({64, 64, 64}, 2);
    for (auto _ : state) {
        Graph g;
        auto y = ops::group_norm(g, g.input(x), g.leaf(gamma), g.leaf(beta), 8);
        benchmark::DoNotOptimize(y->val().data());
    }
}
BENCHMARK(BM_GroupNorm);

}  // namespace

BENCHMARK_MAIN();
