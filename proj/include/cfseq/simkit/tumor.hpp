#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "cfseq/simkit/cohort.hpp"
#include "cfseq/simkit/rng.hpp"

namespace cfseq {

double sphere_volume(double diameter);
double sphere_diameter(double volume);

struct PKPDParams {
    double growth = 0.0;        // Lambda
    double capacity = 1.0;      // K
    double chemo = 0.0;         // kappa_c
    double radio_linear = 0.0;  // kappa_rd
    double radio_quad = 0.0;    // upsilon
    double noise_sd = 0.01;
    double v_min = 0.0;
    double v_max = std::numeric_limits<double>::infinity();
};

/// Truncated-normal priors (resampled until positive). Patient type 1
/// raises the radiation mean and type 3 the chemo mean by type_adjust.
struct PKPDPrior {
    double growth_mean = 7.0e-5;
    double growth_sd = 7.23e-3;
    double radio_mean = 0.0398;
    double radio_sd = 0.168;
    double chemo_mean = 0.028;
    double chemo_sd = 0.0007;
    double alpha_beta_ratio = 10.0;
    double capacity_diameter = 30.0;
    double capacity_sd = 0.0;
    double type_adjust = 0.1;
    double noise_sd = 0.01;
    int max_retries = 10000;

    // Initial diameters: per-stage lognormal (mu, sigma) on log-diameter,
    // truncated to [0.3, upper], stages drawn by incidence weight.
    std::array<double, 5> stage_weight{1432, 128, 1306, 7248, 12840};
    std::array<double, 5> stage_mu{1.72, 1.96, 1.91, 2.76, 3.86};
    std::array<double, 5> stage_sigma{4.70, 1.63, 9.40, 6.87, 8.82};
    std::array<double, 5> stage_upper{5.0, 13.0, 13.0, 13.0, 13.0};
    double diameter_lower = 0.3;
};

struct PatientDraw {
    PKPDParams params;
    int patient_type = 1;  // 1..3
    int stage = 0;         // 0..4
    double initial_volume = 1.0;
};

class ResampleError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

PatientDraw sample_pkpd_patient(const PKPDPrior& prior, Rng& rng);

/// One day of the PK-PD recursion, clamped to [v_min, v_max].
double step_tumor(double v_prev, double chemo_conc, double radiation_dose, double noise, const PKPDParams& p);

/// Probability of each of chemo and radiation given recent diameters.
double tumor_assignment_probability(std::span<const double> diameters, double gamma, double d_max = 13.0);

struct TumorAssignment {
    bool chemo = false;
    bool radio = false;
    int code() const { return (chemo ? 1 : 0) + (radio ? 2 : 0); }
};

TumorAssignment assign_treatment_tumor(std::span<const double> diameters, double gamma, Rng& rng,
                                       double d_max = 13.0);

struct TumorConfig {
    PKPDPrior prior;
    double gamma = 1.0;
    double chemo_dose = 5.0;
    double radio_dose = 2.0;
    double drug_half_life = 1.0;
    std::size_t window = 15;
    double d_max = 13.0;
    double v_min = 1e-3;
    double v_max_diameter = 13.0;  // also the outcome scale
    std::size_t tau = 10;          // active lengths are drawn in [tau + 5, max_len]

    KeyValues to_kv() const;
    static TumorConfig from_kv(const KeyValues& kv);
};

/// Unit ids are first_unit_id, first_unit_id + 1, ...; each unit draws from
/// its own substream so cohorts do not depend on generation order.
Cohort simulate_tumor_cohort(const TumorConfig& cfg, std::size_t n, std::size_t max_len, std::uint64_t seed,
                             std::int64_t first_unit_id = 0);

/// Volumes for steps 0..T-1 under the given treatment codes, using the
/// unit's recorded parameters and noise.
std::vector<double> tumor_rollout(const TumorConfig& cfg, const SimState& state, const std::vector<int>& codes);

}  // namespace cfseq
