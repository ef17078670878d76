#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "diffmark/ident/identify.hpp"
#include "diffmark/io/checkpoint.hpp"
#include "diffmark/io/image.hpp"
#include "diffmark/lab/stages.hpp"

using namespace diffmark;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Every stage at a size that runs in seconds.
json tiny_json() {
    return json::parse(R"({
      "seed": 3,
      "data": {"n": 60, "seed": 2},
      "vae": {"width": 8},
      "vae_train": {"epochs": 1, "batch": 16, "psnr_floor": -1000},
      "denoiser": {"base": 8, "mid": 16, "emb_dim": 16, "time_freq_dim": 16},
      "denoiser_train": {"epochs": 1, "batch": 16, "mse_threshold": 100},
      "distill": {"steps": 3, "batch": 4},
      "codec": {"bits": 8, "embed_dim": 8},
      "pretrain": {"max_steps": 10, "batch": 8},
      "train": {"steps": 4, "batch": 2, "ddim_steps": 2, "lcm_steps": 2,
                "curriculum": {"tau_imp": 2, "beta_warmup": 2}},
      "embed": {"ddim_steps": 2},
      "eval": {"images": 4, "sweep_levels": 2, "sweep_kinds": ["noise", "jpeg", "regen_vae"],
               "bootstrap": 20, "surrogate": {"epochs": 1, "batch": 16},
               "ident_real": 6, "ident_database": 40, "scaling_sizes": [20],
               "transfer_wide_base": 12, "transfer_wide_mid": 24, "latency_images": 3}
    })");
}

fs::path fresh_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("diffmark_lab_" + name);
    fs::remove_all(p);
    return p;
}

std::string first_line(const fs::path& p) {
    std::ifstream f(p);
    std::string l;
    std::getline(f, l);
    return l;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(DIFFMARK_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("config parsing and overrides") {
    const auto d = lab::default_config();
    CHECK(d.stages == lab::stage_names());
    CHECK(d.train.curriculum.tau_imp == 500);
    CHECK(d.embed.injection == training::InjectionScale::full);
    CHECK(d.train.train_injection == training::InjectionScale::one_over_N);

    CHECK(lab::parse_config(json::object()).codec.bits == 16);
    CHECK_THROWS_AS(lab::parse_config(json{{"trian", json::object()}}), ConfigError);
    CHECK_THROWS_AS(lab::parse_config(json{{"train", {{"stpes", 3}}}}), ConfigError);
    CHECK_THROWS_AS(lab::parse_config(json{{"train", {{"steps", "many"}}}}), ConfigError);
    CHECK_THROWS_AS(lab::parse_config(json{{"stages", {"train-vae", "bake"}}}), ConfigError);
    CHECK_THROWS_AS(lab::parse_config(json{{"eval", {{"fpr", 0}}}}), ConfigError);
    CHECK_THROWS_AS(lab::parse_config(json{{"train", {{"curriculum", {{"tau_rec", 600}}}}}}), ConfigError);
    CHECK_THROWS_AS(lab::parse_config(json{{"embed", {{"injection", "half"}}}}), ConfigError);

    json j = json::object();
    lab::apply_override(j, "train.curriculum.tau_imp=0");
    lab::apply_override(j, "embed.injection=one_over_N");
    lab::apply_override(j, "eval.sweep_kinds=[\"blur\"]");
    const auto c = lab::parse_config(j);
    CHECK(c.train.curriculum.tau_imp == 0);
    CHECK(c.embed.injection == training::InjectionScale::one_over_N);
    CHECK(c.eval.sweep_kinds == std::vector{attacks::AttackKind::blur});
    CHECK_THROWS_AS(lab::apply_override(j, "novalue"), ConfigError);

    CHECK(lab::config_hash(json{{"a", 1}}) == lab::config_hash(json{{"a", 1}}));
    CHECK(lab::config_hash(json{{"a", 1}}) != lab::config_hash(json{{"a", 2}}));

    CHECK(lab::resolve_root("x") == fs::path("x"));
    ::setenv("DIFFMARK_OUTPUT_ROOT", "/tmp/from_env", 1);
    CHECK(lab::resolve_root("") == fs::path("/tmp/from_env"));
    ::unsetenv("DIFFMARK_OUTPUT_ROOT");
    CHECK(lab::resolve_root("") == fs::path("diffmark_out"));
}

TEST_CASE("missing dependencies name the absent stage") {
    lab::Lab lab(lab::parse_config(tiny_json()), fresh_dir("deps"));
    try {
        lab.run("train-diffusion");
        FAIL("expected a dependency error");
    } catch (const DependencyError& e) {
        CHECK(e.missing_stage == "train-vae");
    }
    try {
        lab.watermark_codec();
        FAIL("expected a dependency error");
    } catch (const DependencyError& e) {
        CHECK(e.missing_stage == "train-watermark");
    }
    fs::remove_all(lab.root());
}

TEST_CASE("empty dataset stage") {
    auto j = tiny_json();
    j["data"]["n"] = 0;
    lab::Lab lab(lab::parse_config(j), fresh_dir("empty"));
    const auto r = lab.run("gen-data");
    CHECK(r.summary["images"] == 0);
    CHECK(fs::exists(lab.dir("gen-data") / "manifest.csv"));
    CHECK(lab::load_dataset(lab.dir("gen-data")).size() == 0);
    fs::remove_all(lab.root());
}

TEST_CASE("tiny end-to-end pipeline is idempotent") {
    lab::Lab lab(lab::parse_config(tiny_json()), fresh_dir("e2e"));
    std::map<std::string, lab::StageRecord> first;
    for (const auto& s : lab::stage_names()) {
        CAPTURE(s);
        first[s] = lab.run(s);
        CHECK_FALSE(first[s].skipped);
        CHECK_FALSE(first[s].artifacts.empty());
        CHECK(lab.done(s));
    }
    // Up-to-date stages are skipped.
    CHECK(lab.run("train-vae").skipped);

    // Recomputing reproduces every artifact byte for byte.
    for (const auto& s : {"gen-data", "pretrain-codec", "train-watermark", "embed", "detect", "identify"}) {
        CAPTURE(s);
        CHECK(lab.run(s, true).artifacts == first[s].artifacts);
    }

    // Every CSV carries a header and a config hash column.
    for (const auto& [stage, file] : std::vector<std::pair<std::string, std::string>>{
             {"train-watermark", "metrics.csv"},
             {"embed", "manifest.csv"},
             {"detect", "detect.csv"},
             {"attack-sweep", "attack_sweep.csv"},
             {"attack-sweep", "spearman.csv"},
             {"identify", "identify.csv"},
             {"identify", "scaling.csv"},
             {"transfer", "transfer.csv"}}) {
        CAPTURE(file);
        const auto h = first_line(lab.dir(stage) / file);
        CHECK(h.find("config_hash") != std::string::npos);
    }
    CHECK(fs::exists(lab.dir("report") / "signal" / "delta_channel3.png"));
    CHECK(fs::exists(lab.root() / "timing" / "detect_latency.json"));

    // Changing a config block invalidates that stage and everything after it.
    auto j = tiny_json();
    j["train"]["steps"] = 5;
    lab::Lab changed(lab::parse_config(j), lab.root());
    CHECK(changed.done("distill-lcm"));
    CHECK_FALSE(changed.done("train-watermark"));
    CHECK_FALSE(changed.done("report"));
    CHECK_THROWS_AS(changed.run("report"), DependencyError);

    // Injection A/B: one row per (training, inference) policy pair.
    const auto ab = lab.injection_ab();
    CHECK(ab.size() == 2);
    CHECK(ab["one_over_N"].contains("full"));
    std::ifstream abf(lab.root() / "injection-ab" / "ab.csv");
    std::string l;
    int rows = 0;
    while (std::getline(abf, l)) ++rows;
    CHECK(rows == 5);

    // Single-image commands.
    const auto png = lab.root() / "one.png";
    lab.embed_to({"a5", 3, 42}, png);
    const auto img = io::read_png(png);
    CHECK(img.shape == Shape{3, 32, 32});
    const auto det = lab.detect_file(png, "a5", 0.05);
    CHECK(det["decoded_hex"].get<std::string>().size() == 2);
    CHECK(det["detected"] == (det["matches"].get<int>() > det["tau"].get<int>()));
    CHECK_THROWS_AS(lab.embed_to({"fff", 0, 1}, png), ShapeError);
    const auto attacked = lab.root() / "attacked.png";
    lab.attack_file(png, attacked, {attacks::AttackKind::rotation, 30, 1});
    CHECK(io::read_png(attacked).data != img.data);
    lab.attack_file(png, attacked, {attacks::AttackKind::adv_rn_surrogate, 2, 1});
    CHECK(fs::exists(attacked));
    fs::remove_all(lab.root());
}

TEST_CASE("command line exit codes") {
    const auto root = fresh_dir("cli");
    fs::create_directories(root);
    const auto cfg = root / "tiny.json";
    {
        std::ofstream f(cfg);
        f << tiny_json().dump();
    }
    const std::string base = "--config " + cfg.string() + " --output-root " + root.string();
    CHECK(run_cli("config " + base) == 0);
    CHECK(run_cli("config " + base + " --override train.stpes=3") == 2);
    CHECK(run_cli("config --config " + (root / "missing.json").string()) == 2);
    CHECK(run_cli("bake") == 2);
    CHECK(run_cli("train-vae " + base) == 3);
    CHECK(run_cli("gen-data " + base) == 0);
    CHECK(fs::exists(root / "gen-data" / "manifest.csv"));
    CHECK(run_cli("gen-data " + base) == 0);
    CHECK(run_cli("detect " + base + " --in x.png --key-hex 00") == 3);
    const auto png = root / "gen-data" / "000000.png";
    CHECK(run_cli("attack " + base + " --kind blur --strength 5 --in " + png.string() + " --out " +
                  (root / "b.png").string()) == 0);
    CHECK(run_cli("attack " + base + " --kind blur --strength 50 --in " + png.string() + " --out " +
                  (root / "b.png").string()) == 5);
    CHECK(run_cli("attack " + base + " --kind smudge --strength 5 --in " + png.string() + " --out " +
                  (root / "b.png").string()) == 2);
    CHECK(run_cli("attack " + base + " --kind regen_vae --strength 3 --in " + png.string() + " --out " +
                  (root / "b.png").string()) == 3);
    // A VAE that cannot reach its PSNR floor is a numeric failure.
    CHECK(run_cli("train-vae " + base + " --override vae_train.psnr_floor=90") == 4);
    fs::remove_all(root);
}
