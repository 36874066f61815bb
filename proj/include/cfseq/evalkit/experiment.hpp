#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cfseq/decoder/decoder.hpp"
#include "cfseq/evalkit/eval.hpp"

namespace cfseq {

struct GeneratorSection {
    std::string kind = "tumor";  // tumor | ehr
    TumorConfig tumor;
    EHRGenConfig ehr;
    std::size_t n_train = 1000;
    std::size_t n_val = 500;
    std::size_t n_test = 500;
    std::size_t max_len = 60;
};

struct EvalSection {
    Strategy strategy = Strategy::sliding;
    std::size_t origin_stride = 1;
    std::vector<std::size_t> mask_covariates;
};

struct RunSection {
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::string out_dir = "runs";
    std::size_t workers = 1;  // CFSEQ_WORKERS, when set, caps this
};

struct ExperimentConfig {
    GeneratorSection generator;
    EncoderConfig encoder;
    DecoderConfig decoder;
    std::vector<std::string> flags;  // ablation flags applied to the model section
    EvalSection eval;
    RunSection run;
};

/// Supported ablation flags, plus "naive" (no pretraining, no balancing).
const std::vector<std::string>& known_flags();
/// Applies '+'-joined flags; an empty name means the full model.
ExperimentConfig apply_variant(const ExperimentConfig& base, const std::string& variant);

struct CohortSplits {
    Cohort train, val, test;
};

/// Train, validation and test cohorts from one data seed, with disjoint
/// unit ids so every unit draws its own simulator stream.
CohortSplits simulate_splits(const GeneratorSection& g, std::uint64_t seed);
Cohort simulate_split(const GeneratorSection& g, std::uint64_t seed, const std::string& split);

/// Model inputs after confounder masking (identity without masked columns).
CohortSplits model_view(const CohortSplits& data, const EvalSection& eval);

struct FitResult {
    Normalizer norm;
    PretrainResult pretrain;
    TrainResult train;
};

FitResult fit_model(const ExperimentConfig& cfg, const Cohort& train, const Cohort& val, std::uint64_t seed);

struct Evaluation {
    HorizonErrors errors;
    std::vector<double> nrmse;
    double norm_const = 0.0;
    std::size_t n_queries = 0;
};

/// Queries on `truth_cohort` (which carries simulator state), predictions on
/// `input_cohort` (possibly masked; same units).
Evaluation evaluate(const Model& model, const Cohort& input_cohort, const Cohort& truth_cohort,
                    const EvalSection& eval, std::size_t tau, std::uint64_t query_seed, std::size_t workers);

struct VariantReport {
    std::string variant;
    std::vector<double> rmse;       // mean over seeds, per horizon
    std::vector<double> nrmse;      // rmse / norm_const
    std::vector<double> nrmse_sd;   // across seeds
    std::vector<std::size_t> n_queries;
    std::vector<std::uint64_t> seeds;
    double norm_const = 0.0;
    std::vector<std::vector<double>> per_seed_nrmse;

    double mean_nrmse() const;
};

/// Fits and evaluates one variant for every seed on shared data.
VariantReport run_variant(const ExperimentConfig& base, const std::string& variant, const CohortSplits& data,
                          std::size_t workers);

/// The full model first, then each variant, all on the same data and seeds.
std::vector<VariantReport> run_ablation(const ExperimentConfig& base, const std::vector<std::string>& variants,
                                        const CohortSplits& data, std::size_t workers);

/// `variant,horizon,rmse,nrmse,n_queries,seed_count,norm_const`.
std::string report_csv(const std::vector<VariantReport>& reports);

/// Hex SHA-1 of "blob <size>\0" + contents, as git computes object ids.
std::string git_blob_hash(const std::string& contents);
std::string sha1_hex(const std::string& contents);

}  // namespace cfseq
