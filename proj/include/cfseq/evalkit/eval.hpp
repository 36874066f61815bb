#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cfseq/decoder/decoder.hpp"
#include "cfseq/simkit/cohort.hpp"
#include "cfseq/simkit/ehr.hpp"
#include "cfseq/simkit/tumor.hpp"

namespace cfseq {

enum class Strategy { sliding, random, factual };

const char* strategy_name(Strategy s);
Strategy parse_strategy(const std::string& s);

struct CFQuery {
    std::int64_t unit_id = 0;
    std::size_t unit = 0;  // index into the cohort
    std::size_t origin = 0;
    std::vector<int> plan;
    std::optional<std::vector<double>> ground_truth;
    Strategy strategy = Strategy::factual;
};

/// Ground-truth potential outcomes with the generator config parsed once.
class CounterfactualOracle {
public:
    explicit CounterfactualOracle(const CohortMeta& meta);
    std::vector<double> operator()(const Trajectory& unit, std::size_t origin, const std::vector<int>& plan) const;

private:
    std::string generator_;
    std::optional<TumorConfig> tumor_;
    std::optional<EHRGenConfig> ehr_;
};

/// Origins t with t + tau inside the observed span, every `stride` steps.
std::vector<std::size_t> query_origins(const Trajectory& unit, std::size_t tau, std::size_t stride = 1);

/// One query per (unit, origin, non-null treatment k, offset d): the plan is
/// all zeros except omega_{t+d} = k.
std::vector<CFQuery> gen_queries_sliding(const Cohort& cohort, std::size_t tau, std::size_t stride = 1);
/// One plan per origin with codes drawn uniformly from the "queries" substream.
std::vector<CFQuery> gen_queries_random(const Cohort& cohort, std::size_t tau, std::uint64_t seed,
                                        std::size_t stride = 1);
/// The recorded treatments after each origin.
std::vector<CFQuery> gen_queries_factual(const Cohort& cohort, std::size_t tau, std::size_t stride = 1);
std::vector<CFQuery> gen_queries(Strategy s, const Cohort& cohort, std::size_t tau, std::uint64_t seed,
                                 std::size_t stride = 1);

/// Worker count from CFSEQ_WORKERS (default 1, at least 1).
std::size_t workers_from_env();

/// Predictions for every query. Work is split over units; the output order
/// and values do not depend on `workers`.
std::vector<std::vector<double>> predict_queries(const Model& model, const Cohort& cohort,
                                                 const std::vector<CFQuery>& queries, std::size_t workers = 1);

struct HorizonErrors {
    std::vector<double> rmse;
    std::vector<std::size_t> count;
};

HorizonErrors rmse_by_horizon(const std::vector<std::vector<double>>& predictions,
                              const std::vector<CFQuery>& queries);
std::vector<double> nrmse(const std::vector<double>& rmse, double normalization);

/// Largest observed outcome in the cohort (active steps only).
double normalization_constant(const Cohort& cohort);

/// Copy with the listed covariate columns zeroed in x. Simulator state is
/// kept, so ground truth is unchanged.
Cohort mask_confounders(const Cohort& cohort, const std::vector<std::size_t>& columns);

struct ProbeResult {
    double accuracy = 0.0;       // held-out
    double majority_rate = 0.0;  // held-out rate of the training majority class
    double log_likelihood = 0.0; // held-out mean log q(w | features)
    double marginal_entropy = 0.0;
};

/// Fits a small softmax classifier (one SELU hidden layer) on the first
/// train_fraction of rows and scores the rest. Features are standardized
/// with training statistics; the last fifth of the training rows picks the
/// step with the lowest held-out loss.
ProbeResult fit_probe(const Tensor& features, const std::vector<int>& labels, std::size_t n_classes,
                      std::uint64_t seed, double train_fraction = 0.7, std::size_t hidden = 32,
                      std::size_t steps = 400);

/// Raw history features for (unit, origin): static covariates plus the last
/// `window` input components, zero-padded before t = 0.
Tensor history_features(const Cohort& cohort, const Normalizer& norm,
                        const std::vector<std::pair<std::size_t, std::size_t>>& unit_origins, std::size_t window);

}  // namespace cfseq
