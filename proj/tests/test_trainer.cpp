#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "idpatch/errors.hpp"
#include "idpatch/image.hpp"
#include "idpatch/trainer.hpp"

using namespace idpatch;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model() {
    ModelConfig c;
    c.feature_dim     = 32;
    c.d_text          = 32;
    c.d_model         = 32;
    c.m_tokens        = 4;
    c.n_in_tokens     = 2;
    c.patch_size      = 8;
    c.text_len        = 4;
    c.n_labels        = 3;
    c.img_size        = 32;
    c.widths          = {8, 16, 32};
    c.heads           = 4;
    c.timesteps       = 16;
    c.temb_dim        = 32;
    c.resampler_depth = 1;
    return c;
}

std::string tiny_dataset(const std::string& name, int count = 12) {
    const std::string dir = (fs::temp_directory_path() / name).string();
    static std::map<std::string, bool> built;
    if (!built[dir]) {
        fs::remove_all(dir);
        synthid::DatasetConfig cfg;
        cfg.count                = count;
        cfg.image_size           = 32;
        cfg.sprite_size          = 16;
        cfg.feature_dim          = 32;
        cfg.n_identities         = 5;
        cfg.n_caption_labels     = 3;
        cfg.n_max                = 2;
        cfg.with_pose_fraction   = 0.5;
        cfg.holdout_combos_per_n = 1;
        cfg.seed                 = 7;
        cfg.out_dir              = dir;
        synthid::build_dataset(cfg);
        built[dir] = true;
    }
    return (fs::path(dir) / "manifest.jsonl").string();
}

TrainConfig tiny_train(const std::string& tag, int steps, int stage) {
    TrainConfig tc;
    tc.stage         = stage;
    tc.steps         = steps;
    tc.batch_size    = 2;
    tc.lr            = 2e-3;
    tc.seed          = 11;
    tc.manifest_path = tiny_dataset("idpatch_trainer_ds");
    tc.threads       = 1;
    tc.log_every     = 0;
    tc.out_dir       = (fs::temp_directory_path() / ("idpatch_train_" + tag)).string();
    tc.model         = tiny_model();
    return tc;
}

}  // namespace

TEST_CASE("make_train_sample is deterministic in (seed, step, slot)") {
    auto manifest = synthid::load_manifest(tiny_dataset("idpatch_trainer_ds"));
    std::vector<Tensor> images;
    for (auto& rec : manifest.records)
        images.push_back(to_signed_tensor(
            read_ppm((fs::path(manifest.root_dir) / rec.image_path).string())));
    auto a = make_train_sample(manifest, images, tiny_model(), 3, 5, 1, 0.1, true);
    auto b = make_train_sample(manifest, images, tiny_model(), 3, 5, 1, 0.1, true);
    CHECK(a.t == b.t);
    for (size_t i = 0; i < a.eps.numel(); i++) REQUIRE(a.eps[i] == b.eps[i]);
    CHECK(a.caption_label == b.caption_label);
    auto c = make_train_sample(manifest, images, tiny_model(), 3, 5, 2, 0.1, true);
    bool same = a.t == c.t;
    for (size_t i = 0; same && i < a.eps.numel(); i++) same = a.eps[i] == c.eps[i];
    CHECK_FALSE(same);
}

TEST_CASE("stage-1 loss ignores the token head entirely") {
    auto manifest = synthid::load_manifest(tiny_dataset("idpatch_trainer_ds"));
    std::vector<Tensor> images;
    for (auto& rec : manifest.records)
        images.push_back(to_signed_tensor(
            read_ppm((fs::path(manifest.root_dir) / rec.image_path).string())));
    Model model;
    model.build(tiny_model(), 2);
    // fill the zero-init layers so the loss is sensitive to conditioning
    {
        Rng prng(77);
        for (auto& p : model.params) {
            bool all_zero = true;
            for (size_t i = 0; i < p.value.numel() && all_zero; i++)
                all_zero = p.value[i] == 0.f;
            if (all_zero)
                for (size_t i = 0; i < p.value.numel(); i++)
                    p.value[i] = static_cast<float>(prng.normal() * 0.05);
        }
    }
    auto sched = diffusion::make_schedule(16, 1e-3, 0.03);
    auto s     = make_train_sample(manifest, images, tiny_model(), 1, 0, 0, 0.0, false);

    Graph g1;
    const float loss1 = build_sample_loss(g1, model, sched, s)->val()[0];
    // zero the token head; stage-1 loss must not move by a single bit
    model.projector.token_head.w->value.zero();
    model.projector.token_head.b->value.zero();
    Graph g2;
    const float loss2 = build_sample_loss(g2, model, sched, s)->val()[0];
    CHECK(loss1 == loss2);

    // with tokens enabled the head obviously matters
    auto s2       = s;
    s2.use_tokens = true;
    Graph g3;
    const float loss3 = build_sample_loss(g3, model, sched, s2)->val()[0];
    model.projector.token_head.w->value[0] = 5.f;
    Graph g4;
    const float loss4 = build_sample_loss(g4, model, sched, s2)->val()[0];
    CHECK(loss3 != loss4);
}

TEST_CASE("zero training steps returns the initialization") {
    auto tc    = tiny_train("zero", 0, 1);
    auto res   = train_stage1(tc);
    Model trained;
    load_checkpoint(res.checkpoint_path, trained);
    Model fresh;
    fresh.build(tc.model, mix_seed({0x54494e4954000001ULL, tc.seed}));
    REQUIRE(trained.params.size() == fresh.params.size());
    for (size_t i = 0; i < trained.params.size(); i++)
        for (size_t j = 0; j < trained.params[i].value.numel(); j++)
            REQUIRE(trained.params[i].value[j] == fresh.params[i].value[j]);
}

TEST_CASE("training is reproducible and thread-count invariant") {
    auto t1  = tiny_train("repro1", 4, 1);
    auto r1  = train_stage1(t1);
    auto t2  = tiny_train("repro2", 4, 1);
    auto r2  = train_stage1(t2);
    REQUIRE(r1.loss_trace.size() == r2.loss_trace.size());
    for (size_t i = 0; i < r1.loss_trace.size(); i++)
        REQUIRE(r1.loss_trace[i] == r2.loss_trace[i]);

    auto t3    = tiny_train("repro3", 4, 1);
    t3.threads = 2;
    auto r3    = train_stage1(t3);
    for (size_t i = 0; i < r1.loss_trace.size(); i++)
        REQUIRE(r1.loss_trace[i] == r3.loss_trace[i]);
}

TEST_CASE("a short stage-1 run reduces the loss") {
    auto tc  = tiny_train("descent", 60, 1);
    auto res = train_stage1(tc);
    REQUIRE(res.loss_trace.size() == 60);
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 10; i++) head += res.loss_trace[i];
    for (int i = 50; i < 60; i++) tail += res.loss_trace[i];
    CHECK(tail < head);
}

TEST_CASE("stage 2 requires a stage-1 checkpoint") {
    auto tc = tiny_train("s2fail", 2, 2);
    CHECK_THROWS_AS(train_stage2(tc), PreconditionError);

    // a single-stage checkpoint is not a valid stage-2 init
    auto single          = tiny_train("single_init", 1, 0);
    auto single_res      = train_single_stage(single);
    auto tc2             = tiny_train("s2fail2", 2, 2);
    tc2.init_checkpoint  = single_res.checkpoint_path;
    CHECK_THROWS_AS(train_stage2(tc2), PreconditionError);
}

TEST_CASE("stage 1 -> stage 2 pipeline produces a loadable stage-2 checkpoint") {
    auto s1      = tiny_train("pipe1", 3, 1);
    auto res1    = train_stage1(s1);
    auto s2      = tiny_train("pipe2", 3, 2);
    s2.init_checkpoint = res1.checkpoint_path;
    auto res2    = train_stage2(s2);
    Model m;
    auto meta = load_checkpoint(res2.checkpoint_path, m);
    CHECK(meta.stage == "stage2");
    CHECK(meta.step == 3);
}

TEST_CASE("checkpoint round-trip is bit exact") {
    Model m;
    m.build(tiny_model(), 77);
    CheckpointMeta meta;
    meta.stage = "single";
    meta.step  = 123;
    meta.seed  = 9;
    const std::string path =
        (fs::temp_directory_path() / "idpatch_ckpt_roundtrip.bin").string();
    save_checkpoint(path, m, meta);
    Model loaded;
    auto got = load_checkpoint(path, loaded);
    CHECK(got.stage == "single");
    CHECK(got.step == 123);
    REQUIRE(loaded.params.size() == m.params.size());
    for (size_t i = 0; i < m.params.size(); i++) {
        REQUIRE(loaded.params[i].name == m.params[i].name);
        for (size_t j = 0; j < m.params[i].value.numel(); j++)
            REQUIRE(loaded.params[i].value[j] == m.params[i].value[j]);
    }
}

TEST_CASE("corrupt and future-version checkpoints are rejected explicitly") {
    Model m;
    m.build(tiny_model(), 1);
    CheckpointMeta meta;
    const std::string path = (fs::temp_directory_path() / "idpatch_ckpt_corrupt.bin").string();
    save_checkpoint(path, m, meta);

    // truncation
    const auto full_size = fs::file_size(path);
    fs::resize_file(path, full_size / 2);
    Model sink;
    try {
        load_checkpoint(path, sink);
        FAIL("expected corruption error");
    } catch (const RuntimeFailure& e) {
        CHECK(std::string(e.what()).find("corrupt") != std::string::npos);
    }

    // future version
    save_checkpoint(path, m, meta);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(4);
        const uint32_t v = 99;
        f.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
    try {
        load_checkpoint(path, sink);
        FAIL("expected version error");
    } catch (const RuntimeFailure& e) {
        CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
}
