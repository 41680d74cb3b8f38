#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "htf/pipeline.hpp"

namespace cfg = htf::config;
namespace pl = htf::pipeline;
namespace att = htf::attack;
namespace model = htf::model;
namespace vocab = htf::vocab;
namespace fs = std::filesystem;
using htf::Tensor;

namespace {

// Shrunken but structurally complete run: one image, a briefly pretrained
// 1-layer model, a handful of PGD iterations.
cfg::RunConfig mini_config(const std::string& out_dir) {
    cfg::RunConfig rc;
    rc.dims.d_model = 32;
    rc.dims.n_layers = 1;
    rc.dims.n_heads = 2;
    rc.dims.ffn_dim = 64;
    rc.n_images = 1;
    rc.response_cap = 8;
    rc.pretrain.steps = 80;
    rc.attack.iterations = 6;
    rc.attack.tail_length = 8;
    rc.generation.max_new_tokens = 16;
    rc.output_dir = out_dir;
    return rc;
}

std::map<std::string, std::string> dir_bytes(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out[e.path().lexically_relative(dir).string()] = pl::read_file(e.path());
    return out;
}

}  // namespace

// ------------------------------- config -------------------------------

TEST_CASE("run config JSON round-trip preserves every field") {
    cfg::RunConfig rc;
    rc.model_seed = 21;
    rc.transfer_model_seed = 8;
    rc.n_images = 3;
    rc.attack.iterations = 123;
    rc.attack.tail_token = vocab::BOX_START;
    rc.generation.max_new_tokens = 77;
    rc.generation.strategy = model::GenerationConfig::Strategy::nucleus;
    rc.generation.top_p = 0.9;
    rc.ablation_tokens = {vocab::IM_END};
    rc.jobs = 2;
    rc.pretrain.steps = 555;
    rc.pretrain.lr = 2e-3;
    rc.pretrain.lr_final = 1e-4;

    cfg::RunConfig back = cfg::from_json(cfg::to_json(rc));
    REQUIRE(back.model_seed == 21);
    REQUIRE(back.transfer_model_seed == 8);
    REQUIRE(back.n_images == 3);
    REQUIRE(back.attack.iterations == 123);
    REQUIRE(back.attack.tail_token == vocab::BOX_START);
    REQUIRE(back.generation.max_new_tokens == 77);
    REQUIRE(back.generation.strategy == model::GenerationConfig::Strategy::nucleus);
    REQUIRE(back.generation.top_p == 0.9);
    REQUIRE(back.ablation_tokens == std::vector<int>{vocab::IM_END});
    REQUIRE(back.jobs == 2);
    REQUIRE(back.pretrain.steps == 555);
    REQUIRE(back.pretrain.lr == 2e-3);
    REQUIRE(back.pretrain.lr_final == 1e-4);
    REQUIRE(cfg::config_hash(back) == cfg::config_hash(rc));
}

TEST_CASE("config hash is sensitive to any semantic change") {
    cfg::RunConfig rc;
    const std::uint64_t base = cfg::config_hash(rc);
    cfg::RunConfig other = rc;
    other.attack_seed = 14;
    REQUIRE(cfg::config_hash(other) != base);
    other = rc;
    other.attack.tail_length = 65;
    REQUIRE(cfg::config_hash(other) != base);
    other = rc;
    other.output_dir = "elsewhere";
    REQUIRE(cfg::config_hash(other) != base);
}

TEST_CASE("finalize propagates seeds and honors the override variable") {
    unsetenv("HTF_SEED_OVERRIDE");
    cfg::RunConfig rc = cfg::finalize(cfg::RunConfig{});
    REQUIRE(rc.pretrain.seed == rc.model_seed);
    REQUIRE(rc.attack.seed == rc.attack_seed);
    REQUIRE(rc.generation.seed == rc.generation_seed);

    setenv("HTF_SEED_OVERRIDE", "555", 1);
    cfg::RunConfig over = cfg::finalize(cfg::RunConfig{});
    REQUIRE(over.attack_seed == 555);
    REQUIRE(over.attack.seed == 555);

    setenv("HTF_SEED_OVERRIDE", "not-a-number", 1);
    REQUIRE_THROWS_AS(cfg::finalize(cfg::RunConfig{}), htf::ConfigError);
    unsetenv("HTF_SEED_OVERRIDE");
}

TEST_CASE("run config validation rejects contract violations") {
    auto expect_bad = [](cfg::RunConfig rc) { REQUIRE_THROWS_AS(rc.validate(), htf::ConfigError); };
    cfg::RunConfig rc;
    REQUIRE_NOTHROW(rc.validate());

    cfg::RunConfig bad = rc;
    bad.prompts_per_image = 59;
    expect_bad(bad);
    bad = rc;
    bad.response_cap = 0;
    expect_bad(bad);
    bad = rc;
    bad.response_cap = 49;
    expect_bad(bad);
    bad = rc;
    bad.jobs = 0;
    expect_bad(bad);
    bad = rc;
    bad.n_images = 0;
    expect_bad(bad);
    bad = rc;
    bad.ablation_tokens = {vocab::EOS};
    expect_bad(bad);
    bad = rc;
    bad.ablation_tokens = {40};
    expect_bad(bad);
    bad = rc;
    bad.attack.tail_length = 130;  // 16 + 64 + 48 + 130 - 1 > 256
    expect_bad(bad);
    bad = rc;
    bad.attack.tail_length = 129;
    REQUIRE_NOTHROW(bad.validate());
}

TEST_CASE("config file loading distinguishes IO and parse failures") {
    REQUIRE_THROWS_AS(cfg::load_file("/nonexistent/path/config.json"), htf::IoError);

    const fs::path dir = fs::temp_directory_path() / "htf-config-test";
    fs::create_directories(dir);
    {
        std::ofstream os(dir / "bad.json");
        os << "{not valid";
    }
    REQUIRE_THROWS_AS(cfg::load_file((dir / "bad.json").string()), htf::ConfigError);

    cfg::RunConfig rc;
    rc.attack.iterations = 99;
    {
        std::ofstream os(dir / "good.json");
        os << cfg::to_json(rc).dump(2);
    }
    cfg::RunConfig loaded = cfg::load_file((dir / "good.json").string());
    REQUIRE(loaded.attack.iterations == 99);
    REQUIRE(loaded.attack.seed == loaded.attack_seed);  // finalize ran
    fs::remove_all(dir);
}

TEST_CASE("banner documents the full-scale reference values") {
    cfg::RunConfig rc;
    std::ostringstream os;
    cfg::print_banner(os, rc);
    const std::string text = os.str();
    REQUIRE(text.find("full-scale reference") != std::string::npos);
    REQUIRE(text.find("(5000)") != std::string::npos);
    REQUIRE(text.find("(1024)") != std::string::npos);
    REQUIRE(text.find("(2048)") != std::string::npos);
    REQUIRE(text.find(htf::hex16(cfg::config_hash(rc))) != std::string::npos);
}

// ------------------------------- run directory plumbing -------------------------------

TEST_CASE("run directory is named by the config hash") {
    cfg::RunConfig rc;
    rc.output_dir = "/tmp/htf-out";
    const fs::path d = pl::run_dir(rc);
    REQUIRE(d.parent_path() == fs::path("/tmp/htf-out"));
    REQUIRE(d.filename().string() == "ht-" + htf::hex16(cfg::config_hash(rc)));
}

TEST_CASE("write-once semantics: create, silent identical rewrite, loud conflict") {
    const fs::path dir = fs::temp_directory_path() / "htf-write-once";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const fs::path f = dir / "probe.txt";
    REQUIRE(pl::write_file_once(f, "alpha"));
    REQUIRE_FALSE(pl::write_file_once(f, "alpha"));
    REQUIRE(pl::read_file(f) == "alpha");
    REQUIRE_THROWS_AS(pl::write_file_once(f, "beta"), htf::IoError);
    REQUIRE(pl::read_file(f) == "alpha");
    fs::remove_all(dir);
}

TEST_CASE("PGM serialization is the exact 8-bit image") {
    auto [img, desc] = htf::dataprep::synthesize_images(1, 11)[0];
    const std::string pgm = pl::to_pgm(img);
    REQUIRE(pgm.rfind("P5\n16 16\n255\n", 0) == 0);
    REQUIRE(pgm.size() == 13 + 256);
    for (int i = 0; i < 16; ++i)
        for (int j = 0; j < 16; ++j) {
            const unsigned char b = static_cast<unsigned char>(pgm[13 + i * 16 + j]);
            REQUIRE(b == static_cast<unsigned char>(std::lround(img.pixels.at(i, j) * 255.0)));
        }
}

TEST_CASE("per-image seeds are domain-separated") {
    cfg::RunConfig rc;
    REQUIRE(pl::image_seed(rc, 0) != pl::image_seed(rc, 1));
    REQUIRE(pl::craft_seed(rc, 0) != pl::craft_seed(rc, 1));
    REQUIRE(pl::image_seed(rc, 0) != pl::craft_seed(rc, 0));
}

// ------------------------------- miniature end-to-end -------------------------------

TEST_CASE("mini pipeline: prepare, clean eval, craft, adversarial eval, ablate") {
    const std::string out = (fs::temp_directory_path() / "htf-mini-run").string();
    fs::remove_all(out);
    cfg::RunConfig rc = cfg::finalize(mini_config(out));
    const fs::path dir = pl::run_dir(rc);
    std::ostringstream log;

    // prepare
    REQUIRE(pl::cmd_prepare(rc, log) == 0);
    for (const char* f : {"config.json", "model.htvlm", "dataset.jsonl", "pretrain_curve.csv",
                          "image_0_clean.pgm", "prepare_summary.json"})
        REQUIRE(fs::exists(dir / f));
    {
        std::istringstream curve(pl::read_file(dir / "pretrain_curve.csv"));
        std::string line;
        int lines = 0;
        while (std::getline(curve, line)) ++lines;
        REQUIRE(lines == rc.pretrain.steps + 1);  // header + one row per step
    }

    // loading the prepared state back matches recomputing it
    auto loaded = pl::try_load_prepared(dir, rc);
    REQUIRE(loaded.has_value());
    REQUIRE(loaded->datasets.size() == 1);
    pl::Prepared fresh = pl::prepare(rc);
    REQUIRE(loaded->params.content_hash() == fresh.params.content_hash());
    cfg::RunConfig two = rc;
    two.n_images = 2;
    REQUIRE_THROWS_AS(pl::try_load_prepared(dir, two), htf::ContractError);

    // clean-only eval before any artifact exists
    REQUIRE(pl::cmd_eval(rc, {}, log) == 0);
    REQUIRE(fs::exists(dir / "report_0_clean.csv"));
    REQUIRE(fs::exists(dir / "eval_summary_clean.json"));
    {
        nlohmann::json s = nlohmann::json::parse(pl::read_file(dir / "eval_summary_clean.json"));
        REQUIRE(s.at("mode").get<std::string>() == "clean_only");
    }

    // craft
    REQUIRE(pl::cmd_craft(rc, log) == 0);
    REQUIRE(fs::exists(pl::artifact_path(dir, 0)));
    REQUIRE(fs::exists(dir / "trace_0.csv"));
    REQUIRE_FALSE(fs::exists(pl::state_path(dir, 0)));  // no leftover snapshots
    {
        std::istringstream tr(pl::read_file(dir / "trace_0.csv"));
        auto rows = att::read_trace_csv(tr);
        REQUIRE(static_cast<int>(rows.size()) == rc.attack.iterations);
        std::istringstream as(pl::read_file(pl::artifact_path(dir, 0)));
        att::Artifact art = att::read_artifact(as);
        REQUIRE(art.image_id == 0);
        REQUIRE(art.delta.max_abs() <= rc.attack.epsilon);
        REQUIRE(art.asr_on_train >= 0.0);
        REQUIRE(art.cfg.seed == pl::craft_seed(rc, 0));
    }
    REQUIRE(pl::cmd_craft(rc, log) == 0);  // idempotent rerun

    // adversarial eval
    REQUIRE(pl::cmd_eval(rc, {}, log) == 0);
    for (const char* f : {"report_0.csv", "histogram_0.csv", "summary_0.json", "eval_summary.json"})
        REQUIRE(fs::exists(dir / f));
    {
        nlohmann::json s = nlohmann::json::parse(pl::read_file(dir / "eval_summary.json"));
        REQUIRE(s.at("mode").get<std::string>() == "clean_vs_adversarial");
        REQUIRE(s.at("images").size() == 1);
        const auto& img0 = s.at("images").at(0);
        REQUIRE(img0.at("image_id").get<int>() == 0);
        REQUIRE(img0.contains("pixel_path"));
        REQUIRE(img0.at("pixel_path").at("asr_gap").get<double>() >= 0.0);
        REQUIRE(img0.at("delta_max_abs").get<double>() <= rc.attack.epsilon);
    }
    REQUIRE_THROWS_AS(pl::cmd_eval(rc, {"/no/such/artifact.htadv"}, log), htf::ConfigError);

    // ablations
    REQUIRE(pl::cmd_ablate(rc, "losses", log) == 0);
    {
        std::istringstream ab(pl::read_file(dir / "ablate_losses.csv"));
        std::string line;
        std::getline(ab, line);
        REQUIRE(line ==
                "row,failed,clean_asr,adv_asr,clean_total_mean,adv_total_mean,adv_visible_mean,adv_quality_mean,"
                "mult_total,mult_visible,error");
        int rows = 0;
        while (std::getline(ab, line)) ++rows;
        REQUIRE(rows == 7);
    }
    REQUIRE(pl::cmd_ablate(rc, "decode", log) == 0);
    {
        std::istringstream ab(pl::read_file(dir / "ablate_decode.csv"));
        std::string line;
        std::getline(ab, line);
        int rows = 0;
        std::string names;
        while (std::getline(ab, line)) {
            ++rows;
            names += line.substr(0, line.find(',')) + ";";
        }
        REQUIRE(rows == 3);
        REQUIRE(names == "greedy;nucleus;max_new_x2;");
    }
    REQUIRE_THROWS_AS(pl::cmd_ablate(rc, "transfer", log), htf::ConfigError);  // no second seed configured
    cfg::RunConfig rt = rc;
    rt.transfer_model_seed = rc.model_seed;
    REQUIRE_THROWS_AS(pl::cmd_ablate(rt, "transfer", log), htf::ConfigError);  // must differ from the primary
    REQUIRE_THROWS_AS(pl::cmd_ablate(rc, "nonsense", log), htf::ConfigError);

    fs::remove_all(out);
}

TEST_CASE("mini pipeline reruns are byte-identical") {
    const std::string out = (fs::temp_directory_path() / "htf-mini-determinism").string();
    fs::remove_all(out);
    cfg::RunConfig rc = cfg::finalize(mini_config(out));
    std::ostringstream log;

    REQUIRE(pl::cmd_prepare(rc, log) == 0);
    REQUIRE(pl::cmd_craft(rc, log) == 0);
    REQUIRE(pl::cmd_eval(rc, {}, log) == 0);
    auto first = dir_bytes(pl::run_dir(rc));
    REQUIRE(first.size() >= 10);

    fs::remove_all(out);
    REQUIRE(pl::cmd_prepare(rc, log) == 0);
    REQUIRE(pl::cmd_craft(rc, log) == 0);
    REQUIRE(pl::cmd_eval(rc, {}, log) == 0);
    auto second = dir_bytes(pl::run_dir(rc));

    REQUIRE(first.size() == second.size());
    for (const auto& [name, bytes] : first) {
        REQUIRE(second.count(name) == 1);
        REQUIRE(second.at(name) == bytes);
    }
    fs::remove_all(out);
}

TEST_CASE("checkpointed crafting produces the same artifact as a straight run") {
    const std::string out_a = (fs::temp_directory_path() / "htf-mini-straight").string();
    const std::string out_b = (fs::temp_directory_path() / "htf-mini-checkpointed").string();
    fs::remove_all(out_a);
    fs::remove_all(out_b);
    cfg::RunConfig ra = cfg::finalize(mini_config(out_a));
    cfg::RunConfig rb = cfg::finalize(mini_config(out_b));
    std::ostringstream log;

    REQUIRE(pl::cmd_craft(ra, log) == 0);  // self-prepares
    REQUIRE(pl::cmd_craft(rb, log, 2) == 0);
    const std::string art_a = pl::read_file(pl::artifact_path(pl::run_dir(ra), 0));
    const std::string art_b = pl::read_file(pl::artifact_path(pl::run_dir(rb), 0));
    REQUIRE(art_a == art_b);
    REQUIRE_FALSE(fs::exists(pl::state_path(pl::run_dir(rb), 0)));
    fs::remove_all(out_a);
    fs::remove_all(out_b);
}

TEST_CASE("transfer ablation runs with an explicit second model seed") {
    const std::string out = (fs::temp_directory_path() / "htf-mini-transfer").string();
    fs::remove_all(out);
    cfg::RunConfig rc = mini_config(out);
    rc.transfer_model_seed = 8;
    rc = cfg::finalize(rc);
    std::ostringstream log;
    REQUIRE(pl::cmd_ablate(rc, "transfer", log) == 0);
    const fs::path dir = pl::run_dir(rc);
    REQUIRE(fs::exists(dir / "ablate_transfer.csv"));
    std::istringstream ab(pl::read_file(dir / "ablate_transfer.csv"));
    std::string header, row;
    REQUIRE(std::getline(ab, header).good());
    REQUIRE(std::getline(ab, row).good());
    REQUIRE(row.rfind("transfer,0,", 0) == 0);  // ran, not failed
    fs::remove_all(out);
}
