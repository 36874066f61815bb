#pragma once

#include <cstddef>
#include <vector>

#include "cfseq/diffcore/tensor.hpp"
#include "cfseq/simkit/cohort.hpp"

namespace cfseq {

/// Input and outcome standardization fitted on the active steps of a
/// training cohort.
struct Normalizer {
    std::vector<double> x_mean, x_sd, v_mean, v_sd;
    double y_offset = 0.0;
    double y_scale = 1.0;
    std::size_t n_treatments = 0;

    static Normalizer fit(const Cohort& train);

    std::size_t d_x() const { return x_mean.size(); }
    std::size_t d_v() const { return v_mean.size(); }
    /// d_v + d_x + K + 1
    std::size_t component_dim() const { return d_v() + d_x() + n_treatments + 1; }

    double scale_y(double y) const { return (y - y_offset) / y_scale; }
    double unscale_y(double s) const { return s * y_scale + y_offset; }
};

/// U_t = [v, x_t, onehot(w_{t-1}), y_{t-1}] (standardized; zero treatment and
/// outcome slots at t = 0).
void write_component(const Trajectory& u, std::size_t t, const Normalizer& norm, double* out);

/// Component vectors for several units over steps 0..len-1, stacked
/// time-major: row t * n + i holds unit i at step t.
struct SequenceBatch {
    std::size_t n = 0;
    std::size_t len = 0;
    Tensor u;                               // [(len * n) x d_u]
    std::vector<std::vector<double>> mask;  // [len][n], 1 while active
    std::vector<std::size_t> units;         // cohort indices
};

SequenceBatch make_sequence_batch(const Cohort& cohort, const std::vector<std::size_t>& units, std::size_t len,
                                  const Normalizer& norm);

std::vector<double> one_hot(int code, std::size_t k);

}  // namespace cfseq
