#include "cfseq/encoder/features.hpp"

#include <cmath>
#include <stdexcept>

namespace cfseq {

Normalizer Normalizer::fit(const Cohort& train) {
    const CohortMeta& m = train.meta;
    Normalizer n;
    n.n_treatments = m.n_treatments;
    n.x_mean.assign(m.d_x, 0.0);
    n.x_sd.assign(m.d_x, 0.0);
    n.v_mean.assign(m.d_v, 0.0);
    n.v_sd.assign(m.d_v, 0.0);
    double steps = 0.0;
    for (const auto& u : train.units)
        for (std::size_t t = 0; t < u.active_len; ++t) {
            for (std::size_t i = 0; i < m.d_x; ++i) n.x_mean[i] += u.x[t][i];
            steps += 1.0;
        }
    for (const auto& u : train.units)
        for (std::size_t i = 0; i < m.d_v; ++i) n.v_mean[i] += u.v[i];
    const double units = static_cast<double>(train.units.size());
    for (double& v : n.x_mean) v /= steps;
    for (double& v : n.v_mean) v /= units;
    for (const auto& u : train.units) {
        for (std::size_t t = 0; t < u.active_len; ++t)
            for (std::size_t i = 0; i < m.d_x; ++i) n.x_sd[i] += std::pow(u.x[t][i] - n.x_mean[i], 2);
        for (std::size_t i = 0; i < m.d_v; ++i) n.v_sd[i] += std::pow(u.v[i] - n.v_mean[i], 2);
    }
    double y_sum = 0.0, y_sq = 0.0;
    for (const auto& u : train.units)
        for (std::size_t t = 0; t < u.active_len; ++t) y_sum += u.y[t], y_sq += u.y[t] * u.y[t];
    if (steps > 0.0) {
        n.y_offset = y_sum / steps;
        const double var = y_sq / steps - n.y_offset * n.y_offset;
        n.y_scale = var > 1e-24 ? std::sqrt(var) : (m.y_scale > 0.0 ? m.y_scale : 1.0);
    }
    // Constant columns (e.g. masked confounders) keep unit scale.
    for (double& v : n.x_sd) v = v / steps > 1e-24 ? std::sqrt(v / steps) : 1.0;
    for (double& v : n.v_sd) v = v / units > 1e-24 ? std::sqrt(v / units) : 1.0;
    return n;
}

std::vector<double> one_hot(int code, std::size_t k) {
    if (code < 0 || static_cast<std::size_t>(code) >= k) {
        throw std::invalid_argument("treatment code " + std::to_string(code) + " outside 0.." + std::to_string(k - 1));
    }
    std::vector<double> out(k, 0.0);
    out[static_cast<std::size_t>(code)] = 1.0;
    return out;
}

void write_component(const Trajectory& u, std::size_t t, const Normalizer& norm, double* out) {
    const std::size_t dv = norm.d_v(), dx = norm.d_x(), k = norm.n_treatments;
    for (std::size_t i = 0; i < dv; ++i) out[i] = (u.v[i] - norm.v_mean[i]) / norm.v_sd[i];
    for (std::size_t i = 0; i < dx; ++i) out[dv + i] = (u.x[t][i] - norm.x_mean[i]) / norm.x_sd[i];
    for (std::size_t i = 0; i < k; ++i) out[dv + dx + i] = 0.0;
    out[dv + dx + k] = 0.0;
    if (t > 0) {
        const int w = u.w[t - 1];
        if (w < 0 || static_cast<std::size_t>(w) >= k) throw std::invalid_argument("treatment code out of range");
        out[dv + dx + static_cast<std::size_t>(w)] = 1.0;
        out[dv + dx + k] = norm.scale_y(u.y[t - 1]);
    }
}

SequenceBatch make_sequence_batch(const Cohort& cohort, const std::vector<std::size_t>& units, std::size_t len,
                                  const Normalizer& norm) {
    SequenceBatch b;
    b.n = units.size();
    b.len = len;
    b.units = units;
    const std::size_t d = norm.component_dim();
    b.u = Tensor(Shape{len * b.n, d}, 0.0);
    b.mask.assign(len, std::vector<double>(b.n, 0.0));
    for (std::size_t i = 0; i < b.n; ++i) {
        const Trajectory& u = cohort.units.at(units[i]);
        const std::size_t steps = std::min(len, u.active_len);
        for (std::size_t t = 0; t < steps; ++t) {
            write_component(u, t, norm, &b.u.data[(t * b.n + i) * d]);
            b.mask[t][i] = 1.0;
        }
    }
    return b;
}

}  // namespace cfseq
