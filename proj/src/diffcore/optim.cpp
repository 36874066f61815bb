#include "cfseq/diffcore/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace cfseq {

namespace {

void check_alignment(const std::vector<Value>& params, const std::vector<Tensor>& grads, OptimizerState& state,
                     bool needs_second) {
    if (params.size() != grads.size()) throw ShapeError("optimizer: parameter and gradient counts differ");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape() != grads[i].shape) {
            throw ShapeError("optimizer: gradient " + to_string(grads[i].shape) + " for parameter " +
                             to_string(params[i].shape()));
        }
    }
    if (state.first.empty()) {
        for (const auto& p : params) state.first.emplace_back(p.shape(), 0.0);
        if (needs_second)
            for (const auto& p : params) state.second.emplace_back(p.shape(), 0.0);
    }
    if (state.first.size() != params.size() || (needs_second && state.second.size() != params.size())) {
        throw ShapeError("optimizer: state does not match the parameter list");
    }
}

bool all_finite(const std::vector<Tensor>& grads) {
    for (const auto& g : grads)
        if (!g.all_finite()) return false;
    return true;
}

}  // namespace

std::vector<Tensor> collect_grads(const Gradients& grads, const std::vector<Value>& params) {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const auto& p : params) out.push_back(grads.of(p));
    return out;
}

double clip_grad_norm(std::vector<Tensor>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads)
        for (double v : g.data) sq += v * v;
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        double s = max_norm / norm;
        for (auto& g : grads)
            for (double& v : g.data) v *= s;
    }
    return norm;
}

bool adamw_step(std::vector<Value>& params, const std::vector<Tensor>& grads, OptimizerState& state,
                const AdamWConfig& cfg) {
    if (cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 || cfg.beta2 >= 1) {
        throw std::invalid_argument("adamw_step: betas must lie in [0, 1)");
    }
    check_alignment(params, grads, state, true);
    if (!all_finite(grads)) return false;
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].mutable_data().data;
        auto& m = state.first[i].data;
        auto& v = state.second[i].data;
        const auto& g = grads[i].data;
        for (std::size_t j = 0; j < p.size(); ++j) {
            p[j] -= cfg.lr * cfg.weight_decay * p[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            double mhat = m[j] / bc1;
            double vhat = v[j] / bc2;
            p[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
    return true;
}

bool sgd_momentum_step(std::vector<Value>& params, const std::vector<Tensor>& grads, OptimizerState& state,
                       const MomentumConfig& cfg) {
    check_alignment(params, grads, state, false);
    if (!all_finite(grads)) return false;
    state.step += 1;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].mutable_data().data;
        auto& vel = state.first[i].data;
        const auto& g = grads[i].data;
        for (std::size_t j = 0; j < p.size(); ++j) {
            vel[j] = cfg.momentum * vel[j] + g[j];
            p[j] -= cfg.lr * vel[j];
        }
    }
    return true;
}

}  // namespace cfseq
