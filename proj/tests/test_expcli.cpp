#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cfseq/decoder/checkpoint.hpp"
#include "cfseq/expcli/commands.hpp"
#include "cfseq/expcli/config.hpp"
#include "cfseq/expcli/svg.hpp"

using namespace cfseq;
namespace fs = std::filesystem;

namespace {

const char* kSmoke = R"(generator:
  kind: tumor
  n_train: 32
  n_val: 16
  n_test: 16
  max_len: 30
model:
  tau: 3
  encoder:
    max_epochs: 3
    batch_size: 16
  decoder:
    max_epochs: 3
    batch_size: 16
run:
  seeds: [7]
)";

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("cfseq_test_expcli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string write(const fs::path& p, const std::string& text) {
    std::ofstream(p) << text;
    return p.string();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string error_of(const std::string& text) {
    try {
        parse_config_text(text, "c.yaml");
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

int run(const std::string& args) {
    const std::string cmd = std::string(CFSEQ_BIN) + " " + args + " 2>/dev/null";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("config defaults, validation and round trip") {
    ExperimentConfig defaults;
    defaults.generator.tumor.tau = defaults.encoder.tau;
    defaults.generator.ehr.tau = defaults.encoder.tau;
    CHECK(parse_config_text("generator:\n  kind: tumor\n") == defaults);
    CHECK(parse_config_text("{}") == defaults);

    auto c = parse_config_text(kSmoke);
    CHECK(c.generator.n_train == 32);
    CHECK(c.encoder.tau == 3);
    CHECK(c.generator.tumor.tau == 3);
    CHECK(c.decoder.max_epochs == 3);
    CHECK(c.run.seeds == std::vector<std::uint64_t>{7});
    CHECK(parse_config_text(serialize_config(c)) == c);
    CHECK(serialize_config(parse_config_text(serialize_config(c))) == serialize_config(c));

    auto e = parse_config_text("generator:\n  kind: ehr\n  ehr:\n    gamma_a: [2.5, 0.5]\nmodel:\n  sigma: 0.125\n"
                               "  flags: [no_infomax]\neval:\n  mask_covariates: [0, 1]\n  strategy: random\n");
    CHECK(e.generator.ehr.gamma_a == std::vector<double>{2.5, 0.5});
    CHECK(parse_config_text(serialize_config(e)) == e);
    CHECK_FALSE(e == c);

    const std::string tau0 = error_of("model:\n  tau: 0\n");
    CHECK(tau0.find("model.tau") != std::string::npos);
    CHECK(tau0.find("line 2") != std::string::npos);
    CHECK(error_of("model:\n  encoder:\n    batchsize: 8\n").find("model.encoder.batchsize") != std::string::npos);
    CHECK(error_of("generator:\n  tumor:\n    gama: 2\n").find("generator.tumor.gama") != std::string::npos);
    CHECK(error_of("model:\n  decoder:\n    batch_size: 1\n").find("model.decoder.batch_size") != std::string::npos);
    CHECK(error_of("model:\n  z_dim: many\n").find("model.z_dim") != std::string::npos);
    CHECK(error_of("model:\n  flags: [no_cpx]\n").find("model.flags") != std::string::npos);
    CHECK(error_of("eval:\n  mask_covariates: [4]\n").find("eval.mask_covariates") != std::string::npos);
    CHECK(error_of("nonsense: 1\n").find("nonsense") != std::string::npos);
    CHECK_THROWS_AS(parse_config("/nonexistent/cfg.yaml"), ConfigError);
}

TEST_CASE("stage fingerprints cover only their inputs") {
    auto a = parse_config_text(kSmoke);
    auto b = a;
    b.decoder.lr *= 2.0;
    const std::string d = data_fingerprint(a, 7);
    CHECK(d == data_fingerprint(b, 7));
    CHECK(d != data_fingerprint(a, 8));
    CHECK(encoder_fingerprint(a, d) == encoder_fingerprint(b, d));
    CHECK(model_fingerprint(a, encoder_fingerprint(a, d)) != model_fingerprint(b, encoder_fingerprint(b, d)));
    b = a;
    b.generator.tumor.gamma = 2.0;
    CHECK(d != data_fingerprint(b, 7));
}

TEST_CASE("smoke pipeline through the command line") {
    const fs::path dir = scratch("smoke");
    const std::string cfg = write(dir / "smoke.yaml", kSmoke);
    const std::string d = (dir / "data").string();
    const auto start = std::chrono::steady_clock::now();

    REQUIRE(run("simulate --config " + cfg + " --seed 7 --out " + d) == 0);
    REQUIRE(run("pretrain --config " + cfg + " --data " + d + " --out " + (dir / "enc").string()) == 0);
    REQUIRE(run("train --config " + cfg + " --data " + d + " --encoder " + (dir / "enc/encoder.ckpt.json").string() +
                " --out " + (dir / "model").string()) == 0);
    const std::string model = (dir / "model/model.ckpt.json").string();
    for (const char* s : {"sliding", "random", "factual"})
        REQUIRE(run("evaluate --config " + cfg + " --data " + d + " --model " + model + " --strategy " + s +
                    " --out " + (dir / "eval" / s).string()) == 0);
    REQUIRE(run("report --in " + (dir / "eval").string() + " --out " + (dir / "fig.svg").string()) == 0);
    CHECK(std::chrono::steady_clock::now() - start < std::chrono::minutes(2));

    for (const char* f : {"data/train.csv", "data/val.meta", "data/test.state.csv", "enc/encoder.ckpt.json",
                          "enc/pretrain_log.csv", "model/model.ckpt.json", "model/train_log.csv",
                          "eval/sliding/report.csv", "eval/sliding/manifest.txt", "fig.svg"})
        CHECK_MESSAGE(fs::is_regular_file(dir / f), f);
    CHECK_FALSE(fs::exists(dir / "data/.partial"));

    const std::string report = slurp(dir / "eval/sliding/report.csv");
    CHECK(report.rfind("variant,horizon,rmse,nrmse,n_queries,seed_count,norm_const\nfull,1,", 0) == 0);
    const std::string manifest = slurp(dir / "eval/sliding/manifest.txt");
    CHECK(manifest.find("config_fingerprint=") != std::string::npos);
    CHECK(manifest.find("seeds=7") != std::string::npos);
    CHECK(manifest.find("input.test.csv=" + git_blob_hash(slurp(dir / "data/test.csv"))) != std::string::npos);
    CHECK(load_model_checkpoint(model).config_fingerprint == manifest.substr(manifest.find("config_fingerprint=") + 19, 40));
    const std::string svg = slurp(dir / "fig.svg");
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(svg.find("sliding") != std::string::npos);

    // Rerunning evaluate on unchanged inputs, with any worker count.
    setenv("CFSEQ_WORKERS", "3", 1);
    REQUIRE(run("evaluate --config " + cfg + " --data " + d + " --model " + model +
                " --strategy sliding --out " + (dir / "again").string()) == 0);
    unsetenv("CFSEQ_WORKERS");
    CHECK(slurp(dir / "again/report.csv") == report);
    CHECK(slurp(dir / "again/manifest.txt") == manifest);

    SUBCASE("missing predecessor artifacts are named") {
        const std::string missing = (dir / "enc/none.json").string();
        try {
            cmd_train(cfg, d, missing, (dir / "m2").string());
            FAIL("expected an error");
        } catch (const StageError& e) {
            CHECK(std::string(e.what()).find(missing) != std::string::npos);
        }
        try {
            cmd_pretrain(cfg, (dir / "nodata").string(), (dir / "e2").string());
            FAIL("expected an error");
        } catch (const StageError& e) {
            CHECK(std::string(e.what()).find((dir / "nodata" / "train.meta").string()) != std::string::npos);
        }
        CHECK(run("train --config " + cfg + " --data " + d + " --encoder " + missing + " --out " +
                  (dir / "m2").string()) == 1);
        CHECK_FALSE(fs::exists(dir / "m2/model.ckpt.json"));
    }

    SUBCASE("mismatched fingerprints are refused") {
        std::string changed = kSmoke;
        changed.replace(changed.find("max_epochs: 3"), 13, "max_epochs: 4");
        const std::string cfg2 = write(dir / "changed.yaml", changed);
        // Only the encoder section changed: the data is accepted, the checkpoint is not.
        CHECK_THROWS_WITH_AS(cmd_train(cfg2, d, (dir / "enc/encoder.ckpt.json").string(), (dir / "m3").string()),
                             doctest::Contains("fingerprint mismatch"), StageError);
        CHECK_THROWS_AS(cmd_evaluate(cfg2, d, model, "sliding", (dir / "e3").string()), StageError);

        std::string regen = kSmoke;
        regen.replace(regen.find("n_test: 16"), 10, "n_test: 17");
        const std::string cfg3 = write(dir / "regen.yaml", regen);
        CHECK_THROWS_WITH_AS(cmd_pretrain(cfg3, d, (dir / "e4").string()), doctest::Contains("fingerprint mismatch"),
                             StageError);
        CHECK(run("evaluate --config " + cfg3 + " --data " + d + " --model " + model + " --strategy sliding --out " +
                  (dir / "e5").string()) == 1);
    }

    SUBCASE("command-line grammar") {
        CHECK(run("evaluate --config " + cfg + " --data " + d + " --model " + model + " --strategy bogus --out " +
                  (dir / "e6").string()) != 0);
        CHECK(run("simulate --config " + cfg + " --out " + (dir / "e7").string()) != 0);
        CHECK(run("frobnicate") != 0);
        CHECK(run("report --in " + (dir / "empty").string() + " --out " + (dir / "x.svg").string()) == 1);
    }
}

TEST_CASE("simulate is byte-identical across reruns and worker counts") {
    const fs::path dir = scratch("determinism");
    const std::string cfg = write(dir / "smoke.yaml", kSmoke);
    cmd_simulate(cfg, 3, (dir / "a").string());
    setenv("CFSEQ_WORKERS", "4", 1);
    cmd_simulate(cfg, 3, (dir / "b").string());
    unsetenv("CFSEQ_WORKERS");
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(dir / "a")) {
        CHECK(slurp(e.path()) == slurp(dir / "b" / e.path().filename()));
        ++files;
    }
    CHECK(files == 13);
}

TEST_CASE("worker cap") {
    unsetenv("CFSEQ_WORKERS");
    CHECK(effective_workers(4) == 4);
    CHECK(effective_workers(0) == 1);
    setenv("CFSEQ_WORKERS", "2", 1);
    CHECK(effective_workers(4) == 2);
    CHECK(effective_workers(1) == 1);
    unsetenv("CFSEQ_WORKERS");
}

TEST_CASE("SVG chart from report rows") {
    const std::string csv =
        "variant,horizon,rmse,nrmse,n_queries,seed_count,norm_const\n"
        "full,1,1,0.01,5,1,100\nfull,2,2,0.02,5,1,100\nno_infomax,1,1.5,0.015,5,1,100\n";
    auto s = series_from_report(csv, "");
    REQUIRE(s.size() == 2);
    CHECK(s[0].label == "full");
    CHECK(s[0].x == std::vector<double>{1.0, 2.0});
    CHECK(s[0].y[1] == doctest::Approx(2.0));
    CHECK_THROWS(series_from_report("a,b\n1,2\n", ""));
    const std::string svg = line_chart_svg(s, "t", "x", "y");
    CHECK(svg.find("</svg>") != std::string::npos);
    CHECK(svg.find("no_infomax") != std::string::npos);
}
