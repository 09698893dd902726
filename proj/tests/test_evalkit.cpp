#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "idpatch/errors.hpp"
#include "idpatch/evalkit.hpp"
#include "idpatch/image.hpp"
#include "testutil.hpp"

using namespace idpatch;
using namespace idpatch::evalkit;
namespace fs = std::filesystem;

namespace {

SimilarityMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    SimilarityMatrix s;
    s.n = static_cast<int>(rows.size());
    for (auto& r : rows)
        for (double v : r) s.values.push_back(v);
    return s;
}

// independent exhaustive oracle: row i is a hit iff S[i][i] beats every other
// column outright, or ties only with higher indices
double assoc_oracle(const SimilarityMatrix& s) {
    int hits = 0;
    for (int i = 0; i < s.n; i++) {
        bool hit = true;
        for (int j = 0; j < s.n; j++) {
            if (j == i) continue;
            if (s.at(i, j) > s.at(i, i) || (s.at(i, j) == s.at(i, i) && j < i)) hit = false;
        }
        if (hit) hits++;
    }
    return static_cast<double>(hits) / s.n;
}

std::string tiny_dataset() {
    const std::string dir = (fs::temp_directory_path() / "idpatch_evalkit_ds").string();
    static bool built = false;
    if (!built) {
        fs::remove_all(dir);
        synthid::DatasetConfig cfg;
        cfg.count                = 60;
        cfg.image_size           = 64;
        cfg.sprite_size          = 16;
        cfg.feature_dim          = 32;
        cfg.n_identities         = 6;
        cfg.n_caption_labels     = 3;
        cfg.n_max                = 2;
        cfg.with_pose_fraction   = 0.5;
        cfg.holdout_combos_per_n = 1;
        cfg.seed                 = 13;
        cfg.out_dir              = dir;
        synthid::build_dataset(cfg);
        built = true;
    }
    return (fs::path(dir) / "manifest.jsonl").string();
}

}  // namespace

TEST_CASE("association accuracy on canonical matrices") {
    CHECK(association_accuracy(from_rows({{1, 0}, {0, 1}})) == 1.0);
    CHECK(association_accuracy(from_rows({{0, 1}, {1, 0}})) == 0.0);
    CHECK(association_accuracy(from_rows({{0.9, 0.1, 0.1, 0.1},
                                          {0.1, 0.9, 0.1, 0.1},
                                          {0.1, 0.1, 0.2, 0.8},
                                          {0.1, 0.1, 0.1, 0.9}})) == 0.75);
    // 3x3 identity
    SimilarityMatrix s;
    s.n      = 3;
    s.values = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    CHECK(association_accuracy(s) == 1.0);
}

TEST_CASE("association accuracy equals the exhaustive oracle on 200 random matrices") {
    Rng rng(55);
    for (int trial = 0; trial < 200; trial++) {
        SimilarityMatrix s;
        s.n = 1 + static_cast<int>(rng.below(8));
        s.values.resize(static_cast<size_t>(s.n) * s.n);
        for (auto& v : s.values) v = rng.uniform(-1.0, 1.0);
        REQUIRE(association_accuracy(s) == assoc_oracle(s));
    }
}

TEST_CASE("association ties resolve to the lowest index") {
    // row 0: tie between columns 0 and 1 -> argmax 0 -> hit
    // row 1: tie between columns 0 and 1 -> argmax 0 -> miss
    CHECK(association_accuracy(from_rows({{0.5, 0.5}, {0.5, 0.5}})) == 0.5);
}

TEST_CASE("association accuracy is invariant to positive row scaling") {
    Rng rng(56);
    for (int trial = 0; trial < 50; trial++) {
        SimilarityMatrix s;
        s.n = 2 + static_cast<int>(rng.below(6));
        s.values.resize(static_cast<size_t>(s.n) * s.n);
        for (auto& v : s.values) v = rng.uniform(-1.0, 1.0);
        SimilarityMatrix scaled = s;
        for (int i = 0; i < s.n; i++) {
            const double c = rng.uniform(0.1, 10.0);
            for (int j = 0; j < s.n; j++)
                scaled.values[static_cast<size_t>(i) * s.n + j] *= c;
        }
        REQUIRE(association_accuracy(s) == association_accuracy(scaled));
    }
}

TEST_CASE("association accuracy rejects bad input") {
    SimilarityMatrix s;
    s.n = 0;
    CHECK_THROWS_AS(association_accuracy(s), PreconditionError);
    s.n      = 2;
    s.values = {1, 0, 0};
    CHECK_THROWS_AS(association_accuracy(s), ShapeError);
}

TEST_CASE("crop_faces: clamping mirrors patch placement, empty input, bad size") {
    Rng rng(57);
    Tensor img = testutil::random_tensor_f({3, 64, 64}, rng, 0.25f);
    auto crops = crop_faces(img, {{2, 30}, {63, 63}}, 16);
    REQUIRE(crops.size() == 2);
    // anchor (2,30): box starts at x=0 (clamped), y=22
    for (int y = 0; y < 16; y++)
        for (int x = 0; x < 16; x++) REQUIRE(crops[0].at3(0, y, x) == img.at3(0, 22 + y, x));
    // anchor (63,63): box [48,64)
    for (int y = 0; y < 16; y++)
        for (int x = 0; x < 16; x++)
            REQUIRE(crops[1].at3(2, y, x) == img.at3(2, 48 + y, 48 + x));
    CHECK(crop_faces(img, {}, 16).empty());
    CHECK_THROWS_AS(crop_faces(img, {{5, 5}}, 0), PreconditionError);
    CHECK_THROWS_AS(crop_faces(img, {{70, 5}}, 16), PreconditionError);
}

TEST_CASE("eval extractor round-trips rendered sprites") {
    EvalExtractor ex(32);
    double worst = 1.0;
    for (uint64_t s = 1; s <= 30; s++) {
        auto f    = synthid::sample_identity(s, 32);
        auto gen  = ex.extract(synthid::render_face(f, 16));
        auto ref  = ex.reference(f, 16);
        worst     = std::min(worst, synthid::cosine_similarity(gen, ref));
    }
    CHECK(worst >= 0.99);
}

TEST_CASE("eval features are not bit-identical to conditioning features") {
    EvalExtractor ex(32);
    auto f   = synthid::sample_identity(5, 32);
    auto gen = ex.extract(synthid::render_face(f, 16));
    bool any_diff = false;
    for (int i = 0; i < 32; i++) any_diff |= gen.values[i] != f.values[i];
    CHECK(any_diff);
}

TEST_CASE("orthogonal reference scores near zero") {
    EvalExtractor ex(32);
    synthid::IdentityFeature a, b;
    a.values.assign(32, 0.f);
    b.values.assign(32, 0.f);
    a.values[0] = 1.f;
    b.values[1] = 1.f;
    auto r = resemblance({synthid::render_face(a, 16)}, {b}, ex, 16);
    REQUIRE(r.scores.size() == 1);
    CHECK(std::abs(r.scores[0]) < 0.1);
}

TEST_CASE("resemblance: direct renders score >= 0.99; empty input has no mean") {
    EvalExtractor ex(32);
    std::vector<Tensor> crops;
    std::vector<synthid::IdentityFeature> refs;
    for (uint64_t s = 1; s <= 5; s++) {
        refs.push_back(synthid::sample_identity(s, 32));
        crops.push_back(synthid::render_face(refs.back(), 16));
    }
    auto r = resemblance(crops, refs, ex, 16);
    REQUIRE(r.mean.has_value());
    CHECK(*r.mean >= 0.99);

    auto empty = resemblance({}, {}, ex, 16);
    CHECK_FALSE(empty.mean.has_value());
    CHECK(empty.scores.empty());

    CHECK_THROWS_AS(resemblance(crops, {}, ex, 16), PreconditionError);
}

TEST_CASE("caption scorer separates labels and is near chance on noise") {
    auto manifest = synthid::load_manifest(tiny_dataset());
    CaptionScorer scorer;
    scorer.fit(manifest);
    REQUIRE(scorer.n_labels() == 3);

    int correct = 0, total = 0;
    for (const auto& rec : manifest.records) {
        const Tensor img = to_unit_tensor(
            read_ppm((fs::path(manifest.root_dir) / rec.image_path).string()));
        const int label = rec.annotation.caption_label;
        bool best       = true;
        for (int other = 0; other < 3; other++)
            if (other != label && scorer.score(img, other) > scorer.score(img, label))
                best = false;
        correct += best ? 1 : 0;
        total++;
    }
    CHECK(static_cast<double>(correct) / total >= 0.95);

    Rng rng(58);
    Tensor noise({3, 64, 64});
    for (size_t i = 0; i < noise.numel(); i++) noise[i] = static_cast<float>(rng.uniform());
    const double p = scorer.score(noise, 0);
    CHECK(std::abs(p - 1.0 / 3.0) <= 0.15);

    // deterministic
    CHECK(scorer.score(noise, 1) == scorer.score(noise, 1));
    CHECK_THROWS_AS(scorer.score(noise, 5), PreconditionError);
}

TEST_CASE("report aggregates are recomputable and JSON round-trips") {
    EvalReport rep;
    rep.config_hash = 42;
    rep.variant     = "full";
    SceneRecord a;
    a.n_faces              = 2;
    a.caption_label        = 1;
    a.resemblance          = {0.9, 0.8};
    a.mean_resemblance     = 0.85;
    a.association_accuracy = 1.0;
    a.text_score           = 0.7;
    a.seconds              = 0.5;
    a.identity_labels      = {3, 1};
    SceneRecord b;
    b.n_faces              = 3;
    b.caption_label        = 0;
    b.resemblance          = {0.6, 0.7, 0.8};
    b.mean_resemblance     = 0.7;
    b.association_accuracy = 2.0 / 3.0;
    b.text_score           = 0.5;
    b.seconds              = 0.7;
    b.identity_labels      = {0, 2, 4};
    rep.scenes             = {a, b};
    rep.recompute_aggregates();

    // face-weighted association: (1.0*2 + 2/3*3) / 5
    CHECK(rep.aggregates.association_accuracy == doctest::Approx((2.0 + 2.0) / 5.0));
    CHECK(rep.aggregates.mean_resemblance ==
          doctest::Approx((0.9 + 0.8 + 0.6 + 0.7 + 0.8) / 5.0));
    CHECK(rep.aggregates.mean_text_score == doctest::Approx(0.6));
    REQUIRE(rep.per_n.size() == 2);

    auto back = EvalReport::from_json_string(rep.to_json_string());
    CHECK(back.scenes.size() == 2);
    CHECK(back.aggregates.association_accuracy == rep.aggregates.association_accuracy);
    CHECK(back.scenes[1].resemblance == rep.scenes[1].resemblance);
    CHECK(back.to_json_string() == rep.to_json_string());
}

TEST_CASE("emit_report writes deterministic files including plots") {
    EvalReport rep;
    rep.variant = "full";
    SceneRecord a;
    a.n_faces              = 1;
    a.resemblance          = {0.9};
    a.mean_resemblance     = 0.9;
    a.association_accuracy = 1.0;
    a.text_score           = 0.8;
    a.seconds              = 0.1;
    rep.scenes             = {a};
    rep.recompute_aggregates();

    const std::string dir = (fs::temp_directory_path() / "idpatch_report").string();
    fs::remove_all(dir);
    auto paths = emit_report(rep, dir);
    REQUIRE(paths.size() == 4);  // report + 3 plots
    for (const auto& p : paths) CHECK(fs::exists(p));

    auto read_bytes = [](const std::string& p) {
        std::ifstream f(p, std::ios::binary);
        std::ostringstream ss;
        ss << f.rdbuf();
        return ss.str();
    };
    std::vector<std::string> first;
    for (const auto& p : paths) first.push_back(read_bytes(p));
    auto paths2 = emit_report(rep, dir);
    for (size_t i = 0; i < paths2.size(); i++) REQUIRE(read_bytes(paths2[i]) == first[i]);

    auto parsed = EvalReport::from_json_string(read_bytes(paths[0]));
    CHECK(parsed.to_json_string() == rep.to_json_string());
}

TEST_CASE("run_protocol: zero combos or styles yields an empty report") {
    Model model;
    ModelConfig mc;
    mc.feature_dim = 32;
    mc.d_text      = 32;
    mc.d_model     = 32;
    mc.m_tokens    = 4;
    mc.n_in_tokens = 2;
    mc.patch_size  = 8;
    mc.text_len    = 4;
    mc.n_labels    = 3;
    mc.img_size    = 64;
    mc.widths      = {8, 16, 32};
    mc.timesteps   = 16;
    mc.temb_dim    = 32;
    mc.resampler_depth = 1;
    model.build(mc, 3);
    CheckpointMeta meta;
    meta.stage = "stage2";
    meta.model = mc;
    Sampler sampler(model, meta);
    auto manifest = synthid::load_manifest(tiny_dataset());
    ProtocolConfig pc;
    pc.combos_per_style = 0;
    pc.styles           = default_styles(3, {1, 2}, false);
    auto rep            = run_protocol(sampler, manifest, pc);
    CHECK(rep.scenes.empty());
}

TEST_CASE("run_protocol produces all four dimensions per scene") {
    Model model;
    ModelConfig mc;
    mc.feature_dim = 32;
    mc.d_text      = 32;
    mc.d_model     = 32;
    mc.m_tokens    = 4;
    mc.n_in_tokens = 2;
    mc.patch_size  = 8;
    mc.text_len    = 4;
    mc.n_labels    = 3;
    mc.img_size    = 64;
    mc.widths      = {8, 16, 32};
    mc.timesteps   = 16;
    mc.temb_dim    = 32;
    mc.resampler_depth = 1;
    model.build(mc, 3);
    CheckpointMeta meta;
    meta.stage = "stage2";
    meta.model = mc;
    Sampler sampler(model, meta);
    auto manifest = synthid::load_manifest(tiny_dataset());
    ProtocolConfig pc;
    pc.combos_per_style = 1;
    pc.crop_size        = 16;
    pc.steps            = 2;
    pc.guidance         = 1.0;
    pc.threads          = 2;
    pc.styles           = {{0, 1, false}, {1, 2, true}};
    auto rep            = run_protocol(sampler, manifest, pc);
    REQUIRE(rep.scenes.size() == 2);
    for (const auto& s : rep.scenes) {
        CHECK(s.seconds > 0.0);
        CHECK(s.resemblance.size() == static_cast<size_t>(s.n_faces));
        CHECK(s.association_accuracy >= 0.0);
        CHECK(s.association_accuracy <= 1.0);
        CHECK(s.text_score >= 0.0);
        CHECK(s.text_score <= 1.0);
    }
    // aggregates equal recomputation from scene records
    auto again = rep;
    again.recompute_aggregates();
    CHECK(again.aggregates.association_accuracy == rep.aggregates.association_accuracy);
    CHECK(again.aggregates.mean_resemblance == rep.aggregates.mean_resemblance);
}
