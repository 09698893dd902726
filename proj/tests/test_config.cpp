#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "idpatch/config.hpp"
#include "idpatch/errors.hpp"

using namespace idpatch;
namespace fs = std::filesystem;

TEST_CASE("empty object parses to defaults") {
    auto cfg = run_config_from_json_text("{}");
    CHECK(cfg.seed == 1);
    CHECK(cfg.dataset.count == 4096);
    CHECK(cfg.model.img_size == 128);
    CHECK(cfg.model.n_labels == cfg.dataset.n_caption_labels);
    CHECK(cfg.eval.crop_size == cfg.dataset.sprite_size);
    CHECK(!cfg.dataset.out_dir.empty());
}

TEST_CASE("unknown keys are all listed") {
    const std::string text = R"({
        "seed": 3,
        "bogus_top": 1,
        "dataset": {"count": 10, "wrong_key": 2, "another_bad": 3},
        "train": {"lr": 0.001, "momentum": 0.9}
    })";
    try {
        run_config_from_json_text(text);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("bogus_top") != std::string::npos);
        CHECK(msg.find("dataset.wrong_key") != std::string::npos);
        CHECK(msg.find("dataset.another_bad") != std::string::npos);
        CHECK(msg.find("train.momentum") != std::string::npos);
    }
}

TEST_CASE("non-JSON input fails with a config error") {
    CHECK_THROWS_AS(run_config_from_json_text("not json at all"), ConfigError);
    CHECK_THROWS_AS(run_config_from_json_text("[1,2,3]"), ConfigError);
}

TEST_CASE("invalid model settings are rejected at parse time") {
    CHECK_THROWS_AS(run_config_from_json_text(R"({"model": {"heads": 7}})"), ConfigError);
    CHECK_THROWS_AS(run_config_from_json_text(R"({"model": {"timesteps": 1}})"), ConfigError);
    CHECK_THROWS_AS(run_config_from_json_text(R"({"dataset": {"image_size": 127}})"),
                    ConfigError);
}

TEST_CASE("config hash is stable and run_dir embeds it") {
    auto a = run_config_from_json_text(R"({"seed": 5})");
    auto b = run_config_from_json_text(R"({"seed": 5})");
    auto c = run_config_from_json_text(R"({"seed": 6})");
    CHECK(a.hash() == b.hash());
    CHECK(a.hash() != c.hash());
    char tag[16];
    std::snprintf(tag, sizeof(tag), "%08x", static_cast<uint32_t>(a.hash() & 0xffffffffu));
    CHECK(a.run_dir().find(tag) != std::string::npos);
}

TEST_CASE("flags-over-config precedence lives in derived fields") {
    auto cfg = run_config_from_json_text(
        R"({"dataset": {"n_caption_labels": 5, "feature_dim": 32}})");
    CHECK(cfg.model.n_labels == 5);
    CHECK(cfg.model.feature_dim == 32);
}

TEST_CASE("out_root override is honored") {
    auto cfg = run_config_from_json_text_with_root(R"({"out_root": "runs/xyz"})", "/tmp/envroot");
    CHECK(cfg.out_root == "/tmp/envroot");
    CHECK(cfg.run_dir().rfind("/tmp/envroot", 0) == 0);
    CHECK(cfg.dataset.out_dir.rfind("/tmp/envroot", 0) == 0);
}

TEST_CASE("single_stage_steps defaults to the two-stage budget") {
    auto cfg = run_config_from_json_text(
        R"({"train": {"steps_stage1": 100, "steps_stage2": 50}})");
    CHECK(cfg.single_stage_steps() == 150);
    auto cfg2 = run_config_from_json_text(R"({"train": {"steps_single": 70}})");
    CHECK(cfg2.single_stage_steps() == 70);
}

TEST_CASE("load_run_config reads files and rejects missing ones") {
    const auto path = (fs::temp_directory_path() / "idpatch_cfg_test.json").string();
    {
        std::ofstream f(path);
        f << R"({"seed": 9, "dataset": {"count": 3}})";
    }
    auto cfg = load_run_config(path);
    CHECK(cfg.seed == 9);
    CHECK(cfg.dataset.count == 3);
    CHECK_THROWS_AS(load_run_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("committed config files parse cleanly") {
    for (const char* name : {"default.json", "smoke.json"}) {
        const std::string path = std::string(IDPATCH_REPO_CONFIG_DIR) + "/" + name;
        CHECK_NOTHROW(load_run_config(path));
    }
    auto cfg = load_run_config(std::string(IDPATCH_REPO_CONFIG_DIR) + "/default.json");
    CHECK(cfg.dataset.count == 4096);
    CHECK(cfg.model.patch_size == 16);
    CHECK(cfg.model.m_tokens == 16);
    CHECK(cfg.sample.steps == 50);
    CHECK(cfg.sample.stage_boundary_fraction == 0.2);
}
