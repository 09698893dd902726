#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "idpatch/graph.hpp"
#include "idpatch/nn.hpp"
#include "testutil.hpp"

using namespace idpatch;
using namespace idpatch::testutil;

namespace {

TensorT<double> input_like(Rng& rng, std::vector<int> shape) {
    return random_tensor(std::move(shape), rng);
}

}  // namespace

TEST_CASE("linear forward matches manual computation") {
    GraphT<double> g;
    nn::ParamSetT<double> ps;
    auto& w = ps.add("w", {2, 3});
    auto& b = ps.add("b", {2});
    for (size_t i = 0; i < 6; i++) w.value[i] = static_cast<double>(i + 1);
    b.value[0] = 0.5;
    b.value[1] = -0.5;
    TensorT<double> x({1, 3});
    x[0] = 1.0; x[1] = 2.0; x[2] = 3.0;
    auto y = ops::linear(g, g.input(x), g.leaf(w), g.leaf(b));
    CHECK(y->val()[0] == doctest::Approx(1 + 4 + 9 + 0.5));
    CHECK(y->val()[1] == doctest::Approx(4 + 10 + 18 - 0.5));
}

TEST_CASE("conv2d matches direct convolution on a small case") {
    GraphT<double> g;
    nn::ParamSetT<double> ps;
    Rng rng(11);
    auto& w = ps.add("w", {2, 3, 3, 3});
    for (size_t i = 0; i < w.value.numel(); i++) w.value[i] = rng.normal();
    auto& b = ps.add("b", {2});
    b.value[0] = 0.3;
    b.value[1] = -0.2;
    TensorT<double> x = input_like(rng, {3, 5, 5});
    auto y = ops::conv2d(g, g.input(x), g.leaf(w), g.leaf(b), 1, 1);
    REQUIRE(y->val().shape() == std::vector<int>{2, 5, 5});
    // brute-force a few output positions
    for (auto [co, oy, ox] : {std::tuple{0, 0, 0}, {1, 2, 3}, {0, 4, 4}, {1, 4, 0}}) {
        double acc = b.value[co];
        for (int ci = 0; ci < 3; ci++)
            for (int ky = 0; ky < 3; ky++)
                for (int kx = 0; kx < 3; kx++) {
                    const int iy = oy + ky - 1, ix = ox + kx - 1;
                    if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
                    acc += x.at3(ci, iy, ix) * w.value[((static_cast<size_t>(co) * 3 + ci) * 3 +
                                                        ky) * 3 + kx];
                }
        CHECK(y->val().at3(co, oy, ox) == doctest::Approx(acc).epsilon(1e-10));
    }
}

TEST_CASE("conv2d stride-2 output geometry") {
    GraphT<double> g;
    nn::ParamSetT<double> ps;
    Rng rng(5);
    auto& w = ps.add("w", {4, 2, 3, 3});
    for (size_t i = 0; i < w.value.numel(); i++) w.value[i] = rng.normal();
    auto y = ops::conv2d(g, g.input(input_like(rng, {2, 8, 8})), g.leaf(w), NodeRef<double>{}, 2, 1);
    CHECK(y->val().shape() == std::vector<int>{4, 4, 4});
}

TEST_CASE("gradients: linear/silu/mse chain") {
    Rng rng(42);
    nn::ParamSetT<double> ps;
    ps.add_normal("w", {4, 6}, rng, 0.5);
    ps.add_normal("b", {4}, rng, 0.5);
    TensorT<double> x = input_like(rng, {3, 6});
    TensorT<double> t = input_like(rng, {3, 4});
    auto build = [&](GraphT<double>& g) {
        auto y = ops::silu(g, ops::linear(g, g.input(x), g.leaf(*ps.find("w")),
                                          g.leaf(*ps.find("b"))));
        return ops::mse(g, y, g.input(t));
    };
    auto rep = fd_check(ps, build, 5, 1);
    CHECK(rep.probes_run > 0);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gradients: conv2d stride 1 and 2") {
    for (int stride : {1, 2}) {
        Rng rng(100 + stride);
        nn::ParamSetT<double> ps;
        ps.add_normal("w", {3, 2, 3, 3}, rng, 0.4);
        ps.add_normal("b", {3}, rng, 0.4);
        TensorT<double> x = input_like(rng, {2, 6, 6});
        auto build = [&](GraphT<double>& g) {
            auto y = ops::conv2d(g, g.input(x), g.leaf(*ps.find("w")), g.leaf(*ps.find("b")),
                                 stride, 1);
            TensorT<double> target(y->val().shape());
            return ops::mse(g, y, g.input(target));
        };
        auto rep = fd_check(ps, build, 5, 2);
        CHECK(rep.probes_run > 0);
        CHECK(rep.max_rel_err < 1e-6);
    }
}

TEST_CASE("gradients: conv input path (col2im adjoint)") {
    Rng rng(7);
    nn::ParamSetT<double> ps;
    ps.add_normal("x", {2, 5, 5}, rng, 1.0);
    nn::ParamSetT<double> fixed;
    auto& w = fixed.add_normal("w", {3, 2, 3, 3}, rng, 0.4);
    auto build = [&](GraphT<double>& g) {
        auto y = ops::conv2d(g, g.leaf(*ps.find("x")), g.leaf(w), NodeRef<double>{}, 1, 1);
        TensorT<double> target(y->val().shape());
        return ops::mse(g, y, g.input(target));
    };
    auto rep = fd_check(ps, build, 8, 3);
    CHECK(rep.probes_run > 0);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gradients: group_norm") {
    Rng rng(13);
    nn::ParamSetT<double> ps;
    ps.add_normal("x", {8, 4, 4}, rng, 1.0);
    ps.add_normal("gamma", {8}, rng, 0.3);
    ps.add_normal("beta", {8}, rng, 0.3);
    TensorT<double> t = input_like(rng, {8, 4, 4});
    auto build = [&](GraphT<double>& g) {
        auto y = ops::group_norm(g, g.leaf(*ps.find("x")), g.leaf(*ps.find("gamma")),
                                 g.leaf(*ps.find("beta")), 4);
        return ops::mse(g, y, g.input(t));
    };
    auto rep = fd_check(ps, build, 6, 4);
    CHECK(rep.probes_run > 0);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("gradients: layer_norm") {
    Rng rng(14);
    nn::ParamSetT<double> ps;
    ps.add_normal("x", {5, 12}, rng, 1.0);
    ps.add_normal("gamma", {12}, rng, 0.3);
    ps.add_normal("beta", {12}, rng, 0.3);
    TensorT<double> t = input_like(rng, {5, 12});
    auto build = [&](GraphT<double>& g) {
        auto y = ops::layer_norm(g, g.leaf(*ps.find("x")), g.leaf(*ps.find("gamma")),
                                 g.leaf(*ps.find("beta")));
        return ops::mse(g, y, g.input(t));
    };
    auto rep = fd_check(ps, build, 6, 5);
    CHECK(rep.probes_run > 0);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("gradients: multi-head attention") {
    Rng rng(15);
    nn::ParamSetT<double> ps;
    ps.add_normal("q", {6, 8}, rng, 0.8);
    ps.add_normal("k", {4, 8}, rng, 0.8);
    ps.add_normal("v", {4, 8}, rng, 0.8);
    TensorT<double> t = input_like(rng, {6, 8});
    auto build = [&](GraphT<double>& g) {
        auto y = ops::mha(g, g.leaf(*ps.find("q")), g.leaf(*ps.find("k")), g.leaf(*ps.find("v")),
                          2);
        return ops::mse(g, y, g.input(t));
    };
    auto rep = fd_check(ps, build, 8, 6);
    CHECK(rep.probes_run > 0);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("gradients: film, upsample, concat, transpose, tanh, embed") {
    Rng rng(16);
    nn::ParamSetT<double> ps;
    ps.add_normal("x", {4, 3, 3}, rng, 1.0);
    ps.add_normal("sb", {1, 8}, rng, 0.5);
    ps.add_normal("table", {3, 10}, rng, 0.8);
    TensorT<double> t = input_like(rng, {8, 6, 6});
    auto build = [&](GraphT<double>& g) {
        auto x  = g.leaf(*ps.find("x"));
        auto h  = ops::film(g, x, ops::reshape(g, g.leaf(*ps.find("sb")), {8}));
        // film expects 2C entries; reshape [1,8] -> [8] keeps numel
        auto up = ops::upsample_nearest2(g, h);
        auto cc = ops::concat_channels(g, up, ops::upsample_nearest2(g, ops::tanh_act(g, h)));
        auto e  = ops::embed_row(g, g.leaf(*ps.find("table")), 1, 2, 5);
        auto tr = ops::transpose2(g, e);
        auto s  = ops::mean_all(g, tr);
        auto l1 = ops::mse(g, cc, g.input(t));
        return ops::add(g, l1, s);
    };
    auto rep = fd_check(ps, build, 6, 7);
    CHECK(rep.probes_run > 0);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("deterministic forward: same inputs give identical outputs") {
    Rng rng(21);
    nn::ParamSetT<float> ps;
    ps.add_normal("w", {8, 8}, rng, 0.5);
    Tensor x = random_tensor_f({4, 8}, rng);
    auto run = [&]() {
        GraphT<float> g;
        auto y = ops::linear(g, g.input(x), g.leaf(*ps.find("w")), NodeRef<float>{});
        return y->val();
    };
    auto a = run();
    auto b = run();
    for (size_t i = 0; i < a.numel(); i++) CHECK(a[i] == b[i]);
}

TEST_CASE("param reuse accumulates gradient once per use") {
    nn::ParamSetT<double> ps;
    auto& w = ps.add("w", {1, 1});
    w.value[0] = 3.0;
    GraphT<double> g;
    auto n  = g.leaf(w);
    auto y  = ops::add(g, n, n);  // y = 2w
    auto l  = ops::mean_all(g, y);
    g.backward(l);
    CHECK((*g.grad_for(w))[0] == doctest::Approx(2.0));
}

TEST_CASE("AdamW decays unused but trainable params only via weight decay") {
    nn::ParamSetT<float> ps;
    auto& w    = ps.add("w", {2});
    w.value[0] = 1.0f;
    w.value[1] = -1.0f;
    nn::AdamWT<float>::Options opt;
    opt.lr           = 0.1;
    opt.weight_decay = 0.5;
    nn::AdamWT<float> adam(ps, opt);
    std::vector<Tensor> grads(1);  // empty tensor: no gradient this step
    adam.step(grads);
    CHECK(w.value[0] == doctest::Approx(1.0f));  // untouched without a gradient
    CHECK(w.value[1] == doctest::Approx(-1.0f));
}

TEST_CASE("AdamW cosine decay reaches lr_min fraction") {
    nn::ParamSetT<float> ps;
    ps.add("w", {1});
    nn::AdamWT<float>::Options opt;
    opt.lr          = 1.0;
    opt.total_steps = 100;
    opt.lr_min_frac = 0.1;
    nn::AdamWT<float> adam(ps, opt);
    CHECK(adam.lr_at(0) == doctest::Approx(1.0));
    CHECK(adam.lr_at(100) == doctest::Approx(0.1));
}
