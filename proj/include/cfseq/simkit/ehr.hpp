#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "cfseq/simkit/cohort.hpp"
#include "cfseq/simkit/rng.hpp"

namespace cfseq {

double matern32(double distance, double lengthscale, double variance);

/// Lower Cholesky factor of the Matern-3/2 Gram matrix over `times`
/// (row-major n x n). Jitter starts at 1e-8 and grows tenfold on failure.
std::vector<double> matern_cholesky(const std::vector<double>& times, double lengthscale, double variance);

/// One exact draw at `times`.
std::vector<double> sample_gp_matern(const std::vector<double>& times, double lengthscale, double variance, Rng& rng);
/// Draw with a precomputed factor from matern_cholesky.
std::vector<double> sample_gp_with_factor(const std::vector<double>& factor, std::size_t n, Rng& rng);

/// f(x) = w . phi(x), phi_k(x) = sqrt(2/D) cos(omega_k . x + b_k); omega from
/// the RBF spectral density N(0, I / lengthscale^2).
struct RffFunction {
    std::size_t d_in = 0;
    std::vector<std::vector<double>> omega;  // [D][d_in]
    std::vector<double> phase;               // b_k
    std::vector<double> weight;              // w_k

    std::vector<double> features(const std::vector<double>& x) const;
    double operator()(const std::vector<double>& x) const;
};

RffFunction rff_function(std::size_t d_in, std::size_t feature_count, double lengthscale, Rng& rng);

/// All basis functions of the given degree at t (Cox-de Boor). The last
/// knot span is closed on the right.
std::vector<double> bspline_basis(double t, const std::vector<double>& knots, int degree);

/// E(t) = sum_{i=t-w}^{t} min_l 1[A_i^l = 1] p_i^l beta_l / (t - i + 1)^2.
/// treated/prob are [steps][d_a]; treatment l only counts inside its own
/// window windows[l] (the sum spans the largest).
double apply_treatment_effect(const std::vector<std::vector<int>>& treated,
                              const std::vector<std::vector<double>>& prob, const std::vector<double>& beta,
                              const std::vector<std::size_t>& windows, std::size_t t);

struct EHRGenConfig {
    std::size_t d_x = 25;
    std::size_t d_y = 2;
    std::size_t d_a = 2;
    std::size_t d_v = 3;
    std::vector<double> alpha_s{1.0, 1.0};  // per outcome
    std::vector<double> alpha_g{1.0, 1.0};
    std::vector<double> alpha_f{1.0, 1.0};
    double noise_sd = 0.1;
    double cov_lengthscale = 8.0;   // covariate GPs
    double cov_variance = 1.0;
    double g_lengthscale = 15.0;    // per-patient outcome GP
    double g_variance = 1.0;
    std::size_t rff_features = 100;
    double rff_lengthscale = 5.0;
    std::size_t spline_knots = 6;   // interior knots, cubic
    std::vector<double> gamma_a{1.0, 1.0};
    std::vector<double> gamma_x{1.5, 1.5};
    std::vector<double> bias{0.0, 0.0};
    std::vector<double> beta{-1.5, -1.0, -1.0, -1.5};  // [d_a][d_y] row-major
    std::vector<std::size_t> effect_window{3, 4};      // w^l
    std::vector<std::size_t> outcome_window{3, 4};     // T_l
    std::vector<std::size_t> assign_covariates{0, 1};  // inputs of f_Y^l
    std::size_t tau = 10;

    void validate() const;
    KeyValues to_kv() const;
    static EHRGenConfig from_kv(const KeyValues& kv);
};

/// Cohort-level random functions (spline coefficients, f_Z, f_Y).
struct EHRWorld {
    std::vector<double> knots;
    std::vector<std::vector<double>> spline_coef;  // [d_y][basis]
    std::vector<RffFunction> f_z;                  // per outcome
    std::vector<RffFunction> f_y;                  // per treatment
};

EHRWorld make_ehr_world(const EHRGenConfig& cfg, std::size_t max_len, std::uint64_t seed);

/// Outcome 0 (the modeled outcome) goes to y. The untreated parts of every
/// outcome are kept in sim_state.
Cohort simulate_ehr_cohort(const EHRGenConfig& cfg, std::size_t n, std::size_t max_len, std::uint64_t seed,
                           std::int64_t first_unit_id = 0);

/// Outcome-0 values for steps 0..T-1 under forced treatment codes.
std::vector<double> ehr_rollout(const EHRGenConfig& cfg, const SimState& state, const std::vector<int>& codes);

}  // namespace cfseq
