// End-to-end CLI contract tests: every command is exercised as a subprocess
// on a micro configuration.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "idpatch/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kRoot = (fs::temp_directory_path() / "idpatch_cli_e2e").string();

int run_cli(const std::string& args) {
    const std::string cmd = std::string(IDPATCH_CLI_PATH) + " " + args + " >> " + kRoot +
                            "/stdout.log 2>> " + kRoot + "/stderr.log";
    const int rc = std::system(cmd.c_str());
    return WEXITSTATUS(rc);
}

std::string config_path() { return kRoot + "/config.json"; }

void write_micro_config() {
    fs::create_directories(kRoot);
    json j;
    j["seed"]     = 21;
    j["out_root"] = kRoot + "/runs";
    j["dataset"]  = {{"count", 10},       {"image_size", 32},   {"sprite_size", 16},
                     {"feature_dim", 32}, {"n_identities", 5},  {"n_caption_labels", 2},
                     {"n_max", 2},        {"with_pose_fraction", 0.5},
                     {"holdout_combos_per_n", 2}};
    j["model"]    = {{"d_text", 32},    {"d_model", 32}, {"m_tokens", 4}, {"n_in_tokens", 2},
                     {"patch_size", 8}, {"text_len", 4}, {"timesteps", 16},
                     {"widths", {8, 16, 32}}, {"temb_dim", 32}, {"resampler_depth", 1}};
    j["train"]    = {{"steps_stage1", 2}, {"steps_stage2", 2}, {"batch_size", 2}, {"lr", 0.001},
                     {"threads", 2}, {"log_every", 1}};
    j["sample"]   = {{"steps", 3}, {"guidance", 1.5}};
    j["eval"]     = {{"n_values", {1, 2}}, {"combos_per_style", 1}, {"threads", 2}};
    std::ofstream f(config_path());
    f << j.dump(2);
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string run_dir() {
    // mirror of RunConfig::run_dir for the micro config
    for (const auto& entry : fs::directory_iterator(kRoot + "/runs"))
        if (entry.is_directory()) return entry.path().string();
    return "";
}

}  // namespace

TEST_CASE("full pipeline: dataset -> train 1 -> train 2 -> sample -> eval -> bench") {
    fs::remove_all(kRoot);
    write_micro_config();

    REQUIRE(run_cli("dataset --config " + config_path()) == 0);
    const std::string rd = run_dir();
    REQUIRE(!rd.empty());
    REQUIRE(fs::exists(rd + "/dataset/manifest.jsonl"));

    // stage 2 before stage 1 must fail with the precondition exit code
    CHECK(run_cli("train --config " + config_path() + " --stage 2") == 3);

    REQUIRE(run_cli("train --config " + config_path() + " --stage 1") == 0);
    REQUIRE(fs::exists(rd + "/train_stage1/ckpt_stage1.bin"));
    REQUIRE(fs::exists(rd + "/train_stage1/metrics.jsonl"));

    REQUIRE(run_cli("train --config " + config_path() + " --stage 2") == 0);
    const std::string ckpt = rd + "/train_stage2/ckpt_stage2.bin";
    REQUIRE(fs::exists(ckpt));

    // sample: request by pool labels, deterministic bytes across reruns
    {
        json req = json::array();
        req.push_back({{"labels", {0, 2}},
                       {"locations", {{10, 10}, {26, 26}}},
                       {"caption_label", 1},
                       {"seed", 77},
                       {"pose", "auto"}});
        std::ofstream f(kRoot + "/request.json");
        f << req.dump();
    }
    REQUIRE(run_cli("sample --config " + config_path() + " --ckpt " + ckpt + " --request " +
                    kRoot + "/request.json --out " + kRoot + "/s1") == 0);
    REQUIRE(run_cli("sample --config " + config_path() + " --ckpt " + ckpt + " --request " +
                    kRoot + "/request.json --out " + kRoot + "/s2") == 0);
    std::string img1, img2;
    auto is_sample = [](const fs::path& p) {
        return p.extension() == ".ppm" && p.string().find(".cond.") == std::string::npos;
    };
    for (const auto& e : fs::directory_iterator(kRoot + "/s1"))
        if (is_sample(e.path())) img1 = e.path().string();
    for (const auto& e : fs::directory_iterator(kRoot + "/s2"))
        if (is_sample(e.path())) img2 = e.path().string();
    REQUIRE(!img1.empty());
    REQUIRE(slurp(img1) == slurp(img2));
    CHECK(fs::exists(img1 + ".json"));  // sidecar with request, seed, timing

    // eval emits a report with all four dimensions
    REQUIRE(run_cli("eval --config " + config_path() + " --ckpt " + ckpt + " --out " + kRoot +
                    "/eval") == 0);
    const std::string report_text = slurp(kRoot + "/eval/report.json");
    json report                   = json::parse(report_text);
    CHECK(report.at("aggregates").contains("mean_resemblance"));
    CHECK(report.at("aggregates").contains("association_accuracy"));
    CHECK(report.at("aggregates").contains("mean_text_score"));
    CHECK(report.at("aggregates").contains("mean_seconds"));
    CHECK(fs::exists(kRoot + "/eval/resemblance_vs_n.ppm"));
    CHECK(fs::exists(kRoot + "/eval/association_vs_n.ppm"));
    CHECK(fs::exists(kRoot + "/eval/time_seconds_vs_n.ppm"));

    // bench writes a timing table
    REQUIRE(run_cli("bench --config " + config_path() + " --ckpt " + ckpt +
                    " --n-list 1,2 --runs 1 --out " + kRoot + "/bench") == 0);
    json table = json::parse(slurp(kRoot + "/bench/timing.json"));
    REQUIRE(table.at("rows").size() == 2);
    CHECK(table.at("rows")[0].at("mean_seconds").get<double>() > 0.0);
    CHECK(table.contains("config_hash"));

    // sample exports the conditioning image and placement records alongside
    CHECK(fs::exists(img1 + ".cond.ppm"));
    CHECK(fs::exists(img1 + ".placements.json"));
}

TEST_CASE("exit codes: config errors are 2, missing files are 3") {
    fs::create_directories(kRoot);
    CHECK(run_cli("dataset --config /nonexistent.json") == 2);

    const std::string bad = kRoot + "/bad_config.json";
    {
        std::ofstream f(bad);
        f << R"({"dataset": {"bogus": 1}})";
    }
    CHECK(run_cli("dataset --config " + bad) == 2);

    write_micro_config();
    CHECK(run_cli("eval --config " + config_path() + " --ckpt /missing/ckpt.bin") == 3);
    CHECK(run_cli("sample --config " + config_path() +
                  " --ckpt /missing/ckpt.bin --request /missing/req.json") == 3);

    // bad CLI usage
    CHECK(run_cli("train --config " + config_path() + " --stage 7") == 2);
    CHECK(run_cli("") == 2);
}
