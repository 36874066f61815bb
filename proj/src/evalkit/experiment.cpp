#include "cfseq/evalkit/experiment.hpp"

#include <openssl/sha.h>

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace cfseq {

const std::vector<std::string>& known_flags() {
    static const std::vector<std::string> flags{"no_cpc", "no_infomax", "cdc_loss", "no_balancing", "nwj", "mine",
                                                "naive"};
    return flags;
}

namespace {

void apply_flag(ExperimentConfig& c, const std::string& f) {
    if (f == "no_cpc")
        c.encoder.use_cpc = false;
    else if (f == "no_infomax")
        c.encoder.use_infomax = false;
    else if (f == "cdc_loss")
        c.decoder.balancing = Balancing::cdc;
    else if (f == "no_balancing")
        c.decoder.balancing = Balancing::none;
    else if (f == "nwj")
        c.encoder.infomax_bound = MiBound::nwj;
    else if (f == "mine")
        c.encoder.infomax_bound = MiBound::mine;
    else if (f == "naive") {
        c.encoder.use_cpc = false;
        c.encoder.use_infomax = false;
        c.decoder.balancing = Balancing::none;
    } else {
        std::string list;
        for (const auto& k : known_flags()) list += (list.empty() ? "" : ", ") + k;
        throw std::invalid_argument("unknown ablation flag '" + f + "' (supported: " + list + ")");
    }
    if (!c.encoder.use_cpc && !c.encoder.use_infomax) c.encoder.max_epochs = 0;
}

std::vector<std::string> split_plus(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (ch == '+') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

ExperimentConfig apply_variant(const ExperimentConfig& base, const std::string& variant) {
    ExperimentConfig c = base;
    for (const auto& f : base.flags) apply_flag(c, f);
    if (variant.empty() || variant == "full") return c;
    for (const auto& f : split_plus(variant)) apply_flag(c, f);
    return c;
}

Cohort simulate_split(const GeneratorSection& g, std::uint64_t seed, const std::string& split) {
    std::size_t n = 0;
    std::int64_t first = 0;
    if (split == "train") {
        n = g.n_train;
    } else if (split == "val") {
        n = g.n_val;
        first = 1000000;
    } else if (split == "test") {
        n = g.n_test;
        first = 2000000;
    } else {
        throw std::invalid_argument("unknown split '" + split + "'");
    }
    if (g.kind == "tumor") return simulate_tumor_cohort(g.tumor, n, g.max_len, seed, first);
    if (g.kind == "ehr") return simulate_ehr_cohort(g.ehr, n, g.max_len, seed, first);
    throw std::invalid_argument("unknown generator '" + g.kind + "'");
}

CohortSplits simulate_splits(const GeneratorSection& g, std::uint64_t seed) {
    return CohortSplits{simulate_split(g, seed, "train"), simulate_split(g, seed, "val"),
                        simulate_split(g, seed, "test")};
}

CohortSplits model_view(const CohortSplits& data, const EvalSection& eval) {
    if (eval.mask_covariates.empty()) return data;
    return CohortSplits{mask_confounders(data.train, eval.mask_covariates),
                        mask_confounders(data.val, eval.mask_covariates),
                        mask_confounders(data.test, eval.mask_covariates)};
}

FitResult fit_model(const ExperimentConfig& cfg, const Cohort& train, const Cohort& val, std::uint64_t seed) {
    FitResult r;
    r.norm = Normalizer::fit(train);
    r.pretrain = pretrain_encoder(train, val, r.norm, cfg.encoder, seed);
    r.train = train_decoder(train, val, r.pretrain.encoder, r.norm, cfg.decoder, seed);
    return r;
}

Evaluation evaluate(const Model& model, const Cohort& input_cohort, const Cohort& truth_cohort,
                    const EvalSection& eval, std::size_t tau, std::uint64_t query_seed, std::size_t workers) {
    if (input_cohort.units.size() != truth_cohort.units.size()) {
        throw std::invalid_argument("evaluate: input and ground-truth cohorts differ in size");
    }
    std::vector<CFQuery> qs = gen_queries(eval.strategy, truth_cohort, tau, query_seed, eval.origin_stride);
    if (qs.empty()) throw std::invalid_argument("evaluate: no usable query origins");
    Evaluation e;
    e.errors = rmse_by_horizon(predict_queries(model, input_cohort, qs, workers), qs);
    e.norm_const = normalization_constant(truth_cohort);
    e.nrmse = nrmse(e.errors.rmse, e.norm_const);
    e.n_queries = qs.size();
    return e;
}

double VariantReport::mean_nrmse() const { return mean_of(nrmse); }

VariantReport run_variant(const ExperimentConfig& base, const std::string& variant, const CohortSplits& data,
                          std::size_t workers) {
    const ExperimentConfig cfg = apply_variant(base, variant);
    const CohortSplits view = model_view(data, cfg.eval);
    VariantReport rep;
    rep.variant = variant.empty() ? "full" : variant;
    rep.seeds = cfg.run.seeds;
    if (rep.seeds.empty()) throw std::invalid_argument("run_variant: no seeds configured");
    std::vector<std::vector<double>> rmse;
    for (std::uint64_t seed : rep.seeds) {
        FitResult fit = fit_model(cfg, view.train, view.val, seed);
        // Query plans depend on the data only, so every seed and variant
        // answers the same questions.
        Evaluation ev = evaluate(fit.train.model, view.test, data.test, cfg.eval, cfg.encoder.tau,
                                 data.test.meta.seed, workers);
        rmse.push_back(ev.errors.rmse);
        rep.per_seed_nrmse.push_back(ev.nrmse);
        rep.n_queries = ev.errors.count;
        rep.norm_const = ev.norm_const;
    }
    const std::size_t h = rmse.front().size();
    rep.rmse.assign(h, 0.0);
    rep.nrmse_sd.assign(h, 0.0);
    for (std::size_t j = 0; j < h; ++j) {
        std::vector<double> col, ncol;
        for (std::size_t s = 0; s < rmse.size(); ++s) {
            col.push_back(rmse[s][j]);
            ncol.push_back(rep.per_seed_nrmse[s][j]);
        }
        rep.rmse[j] = mean_of(col);
        const double m = mean_of(ncol);
        double var = 0.0;
        for (double x : ncol) var += (x - m) * (x - m);
        rep.nrmse_sd[j] = ncol.size() > 1 ? std::sqrt(var / static_cast<double>(ncol.size() - 1)) : 0.0;
    }
    rep.nrmse = nrmse(rep.rmse, rep.norm_const);
    return rep;
}

std::vector<VariantReport> run_ablation(const ExperimentConfig& base, const std::vector<std::string>& variants,
                                        const CohortSplits& data, std::size_t workers) {
    for (const auto& v : variants) (void)apply_variant(base, v);  // reject unknown flags before any training
    std::vector<VariantReport> out{run_variant(base, "", data, workers)};
    for (const auto& v : variants) out.push_back(run_variant(base, v, data, workers));
    return out;
}

std::string report_csv(const std::vector<VariantReport>& reports) {
    std::ostringstream s;
    s << "variant,horizon,rmse,nrmse,n_queries,seed_count,norm_const\n";
    for (const auto& r : reports)
        for (std::size_t j = 0; j < r.rmse.size(); ++j)
            s << r.variant << ',' << j + 1 << ',' << format_double(r.rmse[j]) << ',' << format_double(r.nrmse[j])
              << ',' << r.n_queries[j] << ',' << r.seeds.size() << ',' << format_double(r.norm_const) << '\n';
    return s.str();
}

std::string sha1_hex(const std::string& contents) {
    unsigned char digest[SHA_DIGEST_LENGTH];
    SHA1(reinterpret_cast<const unsigned char*>(contents.data()), contents.size(), digest);
    std::string hex;
    char buf[3];
    for (unsigned char b : digest) {
        std::snprintf(buf, sizeof buf, "%02x", b);
        hex += buf;
    }
    return hex;
}

std::string git_blob_hash(const std::string& contents) {
    std::string obj = "blob " + std::to_string(contents.size());
    obj.push_back('\0');
    return sha1_hex(obj + contents);
}

}  // namespace cfseq
