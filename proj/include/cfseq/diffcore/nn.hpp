#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cfseq/diffcore/value.hpp"

namespace cfseq {

/// Named parameters, each tagged with the group that owns it so separate
/// optimizers can address disjoint subsets.
class ParamStore {
public:
    struct Entry {
        std::string name;
        std::string group;
        Value value;
    };

    Value add(const std::string& name, const std::string& group, Tensor init);
    Value get(const std::string& name) const;
    bool contains(const std::string& name) const;
    std::vector<Value> group(const std::string& group) const;
    std::vector<Value> groups(std::initializer_list<std::string> names) const;
    std::vector<Value> all() const;
    const std::vector<Entry>& entries() const { return entries_; }
    std::size_t parameter_count() const;

    /// Independent copy with fresh parameter nodes.
    ParamStore clone() const;
    /// Current values in entry order, and the inverse.
    std::vector<Tensor> snapshot() const;
    void restore(const std::vector<Tensor>& values);

private:
    std::vector<Entry> entries_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) entries.
Tensor init_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng);

/// g * v / ||v|| applied per output row of v ([out x in]); g is [out x 1].
Value weight_norm_apply(const Value& direction, const Value& scale);

struct SpectralNormResult {
    Value weight;
    Tensor u;
    double sigma = 0.0;
    bool floored = false;
};

/// W / sigma_hat with sigma_hat = u^T W v from power iteration seeded by
/// u_state. The singular vectors are treated as constants in the graph.
SpectralNormResult spectral_norm_apply(const Value& weight, const Tensor& u_state, int n_power_iterations);

struct Affine {
    Value weight;  // [out x in]
    Value bias;    // [1 x out]
    Value operator()(const Value& x) const;
};

struct WeightNormAffine {
    Value direction;  // [out x in]
    Value scale;      // [out x 1]
    Value bias;       // [1 x out]
    Value operator()(const Value& x) const;
};

struct SpectralNormAffine {
    Value weight;  // [out x in]
    Value bias;    // [1 x out]
    Tensor u;      // persistent power-iteration state, [out]
    int power_iterations = 1;

    /// With update_u the power-iteration state advances (training);
    /// otherwise the call is a pure function of the parameters.
    Value forward(const Value& x, bool update_u);
};

/// h' = (1 - z) * h + z * tanh(W_h x + U_h (r * h) + b_h) with
/// r, z = sigmoid(W x + U h + b).
struct GruCell {
    Value w_input;       // [3h x in]  rows: reset, update, candidate
    Value w_hidden;      // [2h x h]   rows: reset, update
    Value w_candidate;   // [h x h]
    Value bias;          // [1 x 3h]
    std::size_t hidden = 0;

    Value step(const Value& x, const Value& h) const;
};

Affine make_affine(ParamStore& store, const std::string& name, const std::string& group, std::size_t in,
                   std::size_t out, std::mt19937_64& rng);
WeightNormAffine make_weight_norm_affine(ParamStore& store, const std::string& name, const std::string& group,
                                         std::size_t in, std::size_t out, std::mt19937_64& rng);
SpectralNormAffine make_spectral_norm_affine(ParamStore& store, const std::string& name, const std::string& group,
                                             std::size_t in, std::size_t out, std::mt19937_64& rng);
GruCell make_gru(ParamStore& store, const std::string& name, const std::string& group, std::size_t in,
                 std::size_t hidden, std::mt19937_64& rng);

/// Rebinds layer handles to parameters already present in a store.
Affine bind_affine(const ParamStore& store, const std::string& name);
WeightNormAffine bind_weight_norm_affine(const ParamStore& store, const std::string& name);
SpectralNormAffine bind_spectral_norm_affine(const ParamStore& store, const std::string& name, Tensor u);
GruCell bind_gru(const ParamStore& store, const std::string& name);

class GradCheckError : public std::runtime_error {
public:
    GradCheckError(const std::string& what, std::size_t param, std::size_t element)
        : std::runtime_error(what), param_index(param), element_index(element) {}
    std::size_t param_index;
    std::size_t element_index;
};

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
/// f is re-evaluated with each parameter coordinate shifted by +-eps.
double grad_check(const std::function<Value()>& f, std::vector<Value>& params, double eps = 1e-5);

}  // namespace cfseq
