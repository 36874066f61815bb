#include "cfseq/expcli/commands.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "cfseq/decoder/checkpoint.hpp"
#include "cfseq/evalkit/experiment.hpp"
#include "cfseq/expcli/config.hpp"
#include "cfseq/expcli/svg.hpp"

namespace cfseq {

namespace fs = std::filesystem;

namespace {

const char* kSplits[] = {"train", "val", "test"};

// Artifacts are written under <out>/.partial and renamed into place once
// the whole stage succeeded.
class Staging {
public:
    explicit Staging(const std::string& out) : out_(out), tmp_(fs::path(out) / ".partial") {
        fs::create_directories(out_);
        fs::remove_all(tmp_);
        fs::create_directories(tmp_);
    }
    ~Staging() {
        std::error_code ec;
        fs::remove_all(tmp_, ec);
    }
    Staging(const Staging&) = delete;
    Staging& operator=(const Staging&) = delete;

    const fs::path& dir() const { return tmp_; }
    fs::path file(const std::string& name) const { return tmp_ / name; }
    void write(const std::string& name, const std::string& contents) const { write_file_atomic(file(name), contents); }

    void promote() const {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(tmp_)) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) fs::rename(f, out_ / f.filename());
    }

private:
    fs::path out_, tmp_;
};

void require_file(const fs::path& p, const std::string& what) {
    if (!fs::is_regular_file(p)) throw StageError("missing " + what + ": expected " + p.string());
}

Cohort load_split(const std::string& data, const std::string& split) {
    require_file(fs::path(data) / (split + ".meta"), split + " cohort (run `cfseq simulate` first)");
    return read_cohort(data, split);
}

// The data fingerprint is recomputed from the current config and the seed
// recorded in the cohort.
std::string check_data(const ExperimentConfig& cfg, const Cohort& c, const std::string& data) {
    const std::string expect = data_fingerprint(cfg, c.meta.seed);
    if (c.meta.fingerprint != expect) {
        throw StageError("fingerprint mismatch: cohort in " + data +
                         " was produced by a different generator config (found '" + c.meta.fingerprint +
                         "', expected '" + expect + "')");
    }
    return expect;
}

CohortSplits load_data(const ExperimentConfig& cfg, const std::string& data, std::string& data_fp) {
    CohortSplits s{load_split(data, "train"), load_split(data, "val"), load_split(data, "test")};
    data_fp = check_data(cfg, s.train, data);
    for (const Cohort* c : {&s.val, &s.test})
        if (c->meta.fingerprint != data_fp || c->meta.seed != s.train.meta.seed)
            throw StageError("fingerprint mismatch: splits in " + data + " come from different simulations");
    return s;
}

std::string variant_label(const ExperimentConfig& cfg) {
    if (cfg.flags.empty()) return "full";
    std::string s;
    for (const auto& f : cfg.flags) s += (s.empty() ? "" : "+") + f;
    return s;
}

std::string join_seeds(const std::vector<std::uint64_t>& seeds) {
    std::string s;
    for (auto v : seeds) s += (s.empty() ? "" : ",") + std::to_string(v);
    return s;
}

std::string input_hashes(const std::string& data_dir) {
    std::ostringstream m;
    for (const char* split : kSplits)
        for (const auto& f : cohort_files(data_dir, split, true))
            if (fs::exists(f)) m << "input." << f.filename().string() << "=" << git_blob_hash(read_file(f)) << '\n';
    return m.str();
}

std::string fmt_list(const std::vector<double>& v) {
    std::string s;
    for (double x : v) s += (s.empty() ? "" : ",") + format_double(x);
    return s;
}

}  // namespace

std::size_t effective_workers(std::size_t configured) {
    const char* env = std::getenv("CFSEQ_WORKERS");
    if (!env || !*env) return std::max<std::size_t>(1, configured);
    return std::max<std::size_t>(1, std::min(configured, workers_from_env()));
}

void cmd_simulate(const std::string& config, std::uint64_t seed, const std::string& out) {
    const ExperimentConfig cfg = parse_config(config);
    const std::string fp = data_fingerprint(cfg, seed);
    Staging stage(out);
    for (const char* split : kSplits) {
        Cohort c = simulate_split(cfg.generator, seed, split);
        c.meta.fingerprint = fp;
        write_cohort(c, stage.dir(), split);
    }
    stage.write("config.yaml", serialize_config(cfg));
    stage.promote();
}

void cmd_pretrain(const std::string& config, const std::string& data, const std::string& out) {
    const ExperimentConfig cfg = apply_variant(parse_config(config), "");
    std::string data_fp;
    const CohortSplits view = model_view(load_data(cfg, data, data_fp), cfg.eval);
    const std::uint64_t seed = cfg.run.seeds.front();
    const Normalizer norm = Normalizer::fit(view.train);
    PretrainResult r = pretrain_encoder(view.train, view.val, norm, cfg.encoder, seed);

    Staging stage(out);
    save_encoder_checkpoint(EncoderCheckpoint{norm, r.encoder, encoder_fingerprint(cfg, data_fp)},
                            stage.file("encoder.ckpt.json"));
    write_pretrain_log(r.log, stage.file("pretrain_log.csv"));
    stage.promote();
}

void cmd_train(const std::string& config, const std::string& data, const std::string& encoder,
               const std::string& out) {
    const ExperimentConfig cfg = apply_variant(parse_config(config), "");
    std::string data_fp;
    const CohortSplits view = model_view(load_data(cfg, data, data_fp), cfg.eval);
    require_file(encoder, "encoder checkpoint (run `cfseq pretrain` first)");
    EncoderCheckpoint ek = load_encoder_checkpoint(encoder);
    const std::string enc_fp = encoder_fingerprint(cfg, data_fp);
    if (ek.config_fingerprint != enc_fp) {
        throw StageError("fingerprint mismatch: encoder checkpoint " + encoder +
                         " was trained under a different config or data (found '" + ek.config_fingerprint +
                         "', expected '" + enc_fp + "')");
    }
    TrainResult r = train_decoder(view.train, view.val, ek.enc, ek.norm, cfg.decoder, cfg.run.seeds.front());
    r.model.config_fingerprint = model_fingerprint(cfg, enc_fp);

    Staging stage(out);
    save_model_checkpoint(r.model, stage.file("model.ckpt.json"));
    write_train_log(r.log, stage.file("train_log.csv"));
    stage.promote();
}

void cmd_evaluate(const std::string& config, const std::string& data, const std::string& model,
                  const std::string& strategy, const std::string& out) {
    ExperimentConfig cfg = apply_variant(parse_config(config), "");
    try {
        cfg.eval.strategy = parse_strategy(strategy);
    } catch (const std::invalid_argument& e) {
        throw StageError(e.what());
    }
    std::string data_fp;
    const CohortSplits data_splits = load_data(cfg, data, data_fp);
    const CohortSplits view = model_view(data_splits, cfg.eval);
    require_file(model, "model checkpoint (run `cfseq train` first)");
    const Model m = load_model_checkpoint(model);
    const std::string model_fp = model_fingerprint(cfg, encoder_fingerprint(cfg, data_fp));
    if (m.config_fingerprint != model_fp) {
        throw StageError("fingerprint mismatch: model checkpoint " + model +
                         " was trained under a different config or data (found '" + m.config_fingerprint +
                         "', expected '" + model_fp + "')");
    }
    const std::size_t workers = effective_workers(cfg.run.workers);
    Evaluation ev = evaluate(m, view.test, data_splits.test, cfg.eval, m.tau, data_splits.test.meta.seed, workers);

    VariantReport rep;
    rep.variant = variant_label(cfg);
    rep.rmse = ev.errors.rmse;
    rep.nrmse = ev.nrmse;
    rep.n_queries = ev.errors.count;
    rep.seeds = {cfg.run.seeds.front()};
    rep.norm_const = ev.norm_const;

    std::ostringstream man;
    man << "stage=evaluate\nconfig_fingerprint=" << model_fp << "\nmodel_checkpoint="
        << git_blob_hash(read_file(model)) << "\nstrategy=" << strategy_name(cfg.eval.strategy)
        << "\nseeds=" << join_seeds(rep.seeds) << "\nquery_seed=" << data_splits.test.meta.seed
        << "\nnorm_const=" << format_double(ev.norm_const) << '\n'
        << input_hashes(data);
    Staging stage(out);
    stage.write("report.csv", report_csv({rep}));
    stage.write("manifest.txt", man.str());
    stage.promote();
}

void cmd_ablate(const std::string& config, const std::string& variants, const std::string& out) {
    const ExperimentConfig cfg = parse_config(config);
    std::vector<std::string> list;
    std::string item;
    std::istringstream in(variants);
    while (std::getline(in, item, ','))
        if (!item.empty()) list.push_back(item);
    try {
        for (const auto& v : list) (void)apply_variant(cfg, v);
    } catch (const std::invalid_argument& e) {
        throw StageError(e.what());
    }
    const std::uint64_t data_seed = cfg.run.seeds.front();
    const std::string data_fp = data_fingerprint(cfg, data_seed);
    CohortSplits data = simulate_splits(cfg.generator, data_seed);
    for (Cohort* c : {&data.train, &data.val, &data.test}) c->meta.fingerprint = data_fp;

    Staging stage(out);
    const fs::path data_dir = stage.dir() / "data";
    write_cohort(data.train, data_dir, "train");
    write_cohort(data.val, data_dir, "val");
    write_cohort(data.test, data_dir, "test");
    auto reports = run_ablation(cfg, list, data, effective_workers(cfg.run.workers));

    std::ostringstream man;
    man << "stage=ablate\nconfig_fingerprint=" << sha1_hex(serialize_config(cfg)) << "\ndata_fingerprint=" << data_fp
        << "\nstrategy=" << strategy_name(cfg.eval.strategy) << "\nseeds=" << join_seeds(cfg.run.seeds)
        << "\nnorm_const=" << format_double(reports.front().norm_const) << '\n';
    for (const auto& r : reports) {
        man << "variant." << r.variant << ".mean_nrmse=" << format_double(r.mean_nrmse()) << '\n'
            << "variant." << r.variant << ".nrmse_sd=" << fmt_list(r.nrmse_sd) << '\n';
        for (std::size_t s = 0; s < r.seeds.size(); ++s)
            man << "variant." << r.variant << ".seed." << r.seeds[s] << ".nrmse=" << fmt_list(r.per_seed_nrmse[s])
                << '\n';
    }
    man << input_hashes(data_dir.string());
    stage.write("report.csv", report_csv(reports));
    stage.write("manifest.txt", man.str());
    stage.write("config.yaml", serialize_config(cfg));
    stage.promote();
}

void cmd_report(const std::string& in, const std::string& out_svg) {
    std::vector<fs::path> files;
    if (fs::is_regular_file(in)) {
        files.push_back(in);
    } else if (fs::is_directory(in)) {
        for (const auto& e : fs::recursive_directory_iterator(in))
            if (e.is_regular_file() && e.path().filename() == "report.csv") files.push_back(e.path());
    } else {
        throw StageError("missing report input: expected a report CSV or a directory at " + in);
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw StageError("no report.csv found under " + in);
    std::vector<Series> series;
    for (const auto& f : files) {
        const std::string prefix = files.size() > 1 ? f.parent_path().filename().string() : "";
        try {
            for (auto& s : series_from_report(read_file(f), prefix)) series.push_back(std::move(s));
        } catch (const std::invalid_argument& e) {
            throw StageError(f.string() + ": " + e.what());
        }
    }
    write_file_atomic(out_svg, line_chart_svg(series, "Counterfactual error by horizon", "horizon (steps ahead)",
                                              "NRMSE (%)"));
}

}  // namespace cfseq
