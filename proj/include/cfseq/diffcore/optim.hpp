#pragma once

#include <cstdint>
#include <vector>

#include "cfseq/diffcore/value.hpp"

namespace cfseq {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct MomentumConfig {
    double lr = 1e-2;
    double momentum = 0.9;
};

/// Moments for the adaptive rule, or velocities (in `first`) for momentum.
struct OptimizerState {
    std::vector<Tensor> first;
    std::vector<Tensor> second;
    std::int64_t step = 0;
};

/// Gradients of `params`, in order (zeros where the loss did not reach).
std::vector<Tensor> collect_grads(const Gradients& grads, const std::vector<Value>& params);

/// Rescales grads in place so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(std::vector<Tensor>& grads, double max_norm);

/// Decoupled-weight-decay Adam update. Returns false and leaves params and
/// state untouched when any gradient is non-finite.
[[nodiscard]] bool adamw_step(std::vector<Value>& params, const std::vector<Tensor>& grads, OptimizerState& state,
                              const AdamWConfig& cfg);

/// v <- momentum * v + g; p <- p - lr * v. Same rejection rule as adamw_step.
[[nodiscard]] bool sgd_momentum_step(std::vector<Value>& params, const std::vector<Tensor>& grads,
                                     OptimizerState& state, const MomentumConfig& cfg);

}  // namespace cfseq
