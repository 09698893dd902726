#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "idpatch/errors.hpp"
#include "idpatch/model.hpp"
#include "testutil.hpp"

using namespace idpatch;
using namespace idpatch::testutil;

namespace {

ModelConfig proj_config() {
    ModelConfig c;
    c.feature_dim     = 64;
    c.d_text          = 128;
    c.d_model         = 64;
    c.m_tokens        = 16;
    c.n_in_tokens     = 4;
    c.patch_size      = 16;
    c.text_len        = 8;
    c.n_labels        = 4;
    c.img_size        = 32;
    c.widths          = {8, 16, 32};
    c.heads           = 4;
    c.timesteps       = 16;
    c.temb_dim        = 32;
    c.resampler_depth = 2;
    return c;
}

}  // namespace

TEST_CASE("resampler forward is deterministic and finite") {
    Model model;
    model.build(proj_config(), 3);
    auto f = synthid::sample_identity(10, 64);
    auto a = model.resampler_forward(f);
    auto b = model.resampler_forward(f);
    CHECK(a.shape() == std::vector<int>{16, 64});
    for (size_t i = 0; i < a.numel(); i++) REQUIRE(a[i] == b[i]);
    CHECK(a.all_finite());
}

TEST_CASE("zero feature input still produces finite outputs") {
    Model model;
    model.build(proj_config(), 3);
    synthid::IdentityFeature zero;
    zero.values.assign(64, 0.f);
    CHECK(model.resampler_forward(zero).all_finite());
    CHECK(model.project_patch(zero).all_finite());
    CHECK(model.project_tokens(zero).all_finite());
}

TEST_CASE("project_tokens has shape M x d_text with the default M=16") {
    Model model;
    model.build(proj_config(), 3);
    auto tokens = model.project_tokens(synthid::sample_identity(4, 64));
    CHECK(tokens.shape() == std::vector<int>{16, 128});
}

TEST_CASE("project_patch: purity and bounded range over 100 random features") {
    Model model;
    model.build(proj_config(), 3);
    auto f  = synthid::sample_identity(1, 64);
    auto p1 = model.project_patch(f);
    auto p2 = model.project_patch(f);
    CHECK(p1.shape() == std::vector<int>{3, 16, 16});
    for (size_t i = 0; i < p1.numel(); i++) REQUIRE(p1[i] == p2[i]);

    for (uint64_t s = 1; s <= 100; s++) {
        auto p = model.project_patch(synthid::sample_identity(s, 64));
        for (size_t i = 0; i < p.numel(); i++) {
            REQUIRE(p[i] >= -1.f);
            REQUIRE(p[i] <= 1.f);
        }
    }
}

TEST_CASE("dimension mismatch is rejected") {
    Model model;
    model.build(proj_config(), 3);
    auto bad = synthid::sample_identity(1, 32);
    CHECK_THROWS_AS(model.project_patch(bad), ShapeError);
}

TEST_CASE("token blocks are identical for equal features") {
    Model model;
    model.build(proj_config(), 3);
    auto f = synthid::sample_identity(6, 64);
    auto a = model.project_tokens(f);
    auto b = model.project_tokens(f);
    for (size_t i = 0; i < a.numel(); i++) REQUIRE(a[i] == b[i]);
}

TEST_CASE("shared trunk: token head does not affect patches, trunk affects both") {
    Model model;
    model.build(proj_config(), 3);
    auto f      = synthid::sample_identity(8, 64);
    auto patch0 = model.project_patch(f);
    auto tok0   = model.project_tokens(f);

    // perturb the token head: patches must be bit-identical, tokens change
    model.projector.token_head.w->value[0] += 0.5f;
    auto patch1 = model.project_patch(f);
    auto tok1   = model.project_tokens(f);
    for (size_t i = 0; i < patch0.numel(); i++) REQUIRE(patch0[i] == patch1[i]);
    CHECK(tok0[0] != tok1[0]);

    // perturb the shared trunk: both heads see the change
    model.projector.in_proj.w->value[0] += 0.5f;
    auto patch2 = model.project_patch(f);
    auto tok2   = model.project_tokens(f);
    bool patch_changed = false, tok_changed = false;
    for (size_t i = 0; i < patch2.numel(); i++) patch_changed |= patch2[i] != patch1[i];
    for (size_t i = 0; i < tok2.numel(); i++) tok_changed |= tok2[i] != tok1[i];
    CHECK(patch_changed);
    CHECK(tok_changed);
}

TEST_CASE("projector gradient check through both heads") {
    ModelT<double> model;
    ModelConfig c = proj_config();
    c.feature_dim = 16;
    c.d_text      = 16;
    c.d_model     = 16;
    c.m_tokens    = 4;
    c.n_in_tokens = 2;
    c.patch_size  = 6;
    model.build(c, 9);
    auto f = synthid::sample_identity(11, 16);
    Rng rng(30);
    TensorT<double> patch_target = random_tensor({3, 6, 6}, rng, 0.3);
    TensorT<double> token_target = random_tensor({4, 16}, rng, 0.3);

    auto build = [&](GraphT<double>& g) {
        auto trunk = model.projector.trunk(g, model.feature_node(g, f));
        auto lp    = ops::mse(g, model.projector.patch(g, trunk), g.input(patch_target));
        auto lt    = ops::mse(g, model.projector.tokens(g, trunk), g.input(token_target));
        return ops::add(g, lp, lt);
    };
    auto rep = fd_check(model.params, build, 3, 17);
    CHECK(rep.probes_run >= 5);
    CHECK(rep.max_rel_err < 1e-3);
}
