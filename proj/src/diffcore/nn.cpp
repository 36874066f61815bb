#include "cfseq/diffcore/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace cfseq {

Value ParamStore::add(const std::string& name, const std::string& group, Tensor init) {
    if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    Value v = parameter(std::move(init));
    entries_.push_back({name, group, v});
    return v;
}

Value ParamStore::get(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return e.value;
    throw std::out_of_range("unknown parameter: " + name);
}

bool ParamStore::contains(const std::string& name) const {
    for (const auto& e : entries_)
        if (e.name == name) return true;
    return false;
}

std::vector<Value> ParamStore::group(const std::string& group) const {
    std::vector<Value> out;
    for (const auto& e : entries_)
        if (e.group == group) out.push_back(e.value);
    return out;
}

std::vector<Value> ParamStore::groups(std::initializer_list<std::string> names) const {
    std::vector<Value> out;
    for (const auto& e : entries_)
        for (const auto& g : names)
            if (e.group == g) out.push_back(e.value);
    return out;
}

std::vector<Value> ParamStore::all() const {
    std::vector<Value> out;
    for (const auto& e : entries_) out.push_back(e.value);
    return out;
}

std::size_t ParamStore::parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
}

ParamStore ParamStore::clone() const {
    ParamStore out;
    for (const auto& e : entries_) out.add(e.name, e.group, e.value.data());
    return out;
}

std::vector<Tensor> ParamStore::snapshot() const {
    std::vector<Tensor> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.value.data());
    return out;
}

void ParamStore::restore(const std::vector<Tensor>& values) {
    if (values.size() != entries_.size()) throw ShapeError("ParamStore::restore: entry count differs");
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (values[i].shape != entries_[i].value.shape()) {
            throw ShapeError("ParamStore::restore: " + entries_[i].name + " expects " +
                             to_string(entries_[i].value.shape()) + ", got " + to_string(values[i].shape));
        }
        entries_[i].value.mutable_data() = values[i];
    }
}

Tensor init_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(std::move(shape), 0.0);
    for (double& v : t.data) v = dist(rng);
    return t;
}

Value weight_norm_apply(const Value& direction, const Value& scale) {
    const Shape& s = direction.shape();
    if (s.size() != 2) throw ShapeError("weight_norm: direction must be a matrix, got " + to_string(s));
    if (scale.shape() != Shape{s[0], 1}) {
        throw ShapeError("weight_norm: scale " + to_string(scale.shape()) + " does not match rows of " + to_string(s));
    }
    for (std::size_t r = 0; r < s[0]; ++r) {
        double sq = 0.0;
        for (std::size_t c = 0; c < s[1]; ++c) sq += direction.data().at(r, c) * direction.data().at(r, c);
        if (sq == 0.0) throw DomainError("weight_norm: row " + std::to_string(r) + " has zero norm");
    }
    Value norm = exp(log(sum(direction * direction, 1)) * 0.5);
    return direction * (scale / norm);
}

namespace {

double normalize(std::vector<double>& v) {
    double sq = 0.0;
    for (double x : v) sq += x * x;
    double n = std::sqrt(sq);
    double d = std::max(n, 1e-12);
    for (double& x : v) x /= d;
    return n;
}

}  // namespace

SpectralNormResult spectral_norm_apply(const Value& weight, const Tensor& u_state, int n_power_iterations) {
    const Tensor& w = weight.data();
    if (w.rank() != 2) throw ShapeError("spectral_norm: expected a matrix, got " + to_string(w.shape));
    const std::size_t rows = w.shape[0], cols = w.shape[1];
    if (u_state.size() != rows) {
        throw ShapeError("spectral_norm: u_state " + to_string(u_state.shape) + " for weight " + to_string(w.shape));
    }
    std::vector<double> u = u_state.data;
    std::vector<double> v(cols, 0.0);
    auto update_v = [&] {
        std::fill(v.begin(), v.end(), 0.0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) v[c] += w.data[r * cols + c] * u[r];
        normalize(v);
    };
    for (int it = 0; it < n_power_iterations; ++it) {
        update_v();
        std::vector<double> wu(rows, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) wu[r] += w.data[r * cols + c] * v[c];
        normalize(wu);
        u = wu;
    }
    if (n_power_iterations <= 0) update_v();

    Tensor outer(Shape{rows, cols}, 0.0);
    double sigma = 0.0;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            outer.data[r * cols + c] = u[r] * v[c];
            sigma += u[r] * w.data[r * cols + c] * v[c];
        }

    SpectralNormResult res;
    res.u = Tensor(Shape{rows}, u);
    res.sigma = sigma;
    if (!(std::abs(sigma) >= 1e-12)) {
        res.floored = true;
        res.weight = weight * (1.0 / 1e-12);
        return res;
    }
    Value sigma_v = sum(weight * constant(std::move(outer)));
    res.weight = weight / sigma_v;
    return res;
}

Value Affine::operator()(const Value& x) const { return matmul(x, weight, true) + bias; }

Value WeightNormAffine::operator()(const Value& x) const {
    return matmul(x, weight_norm_apply(direction, scale), true) + bias;
}

Value SpectralNormAffine::forward(const Value& x, bool update_u) {
    SpectralNormResult sn = spectral_norm_apply(weight, u, update_u ? power_iterations : 0);
    if (update_u) u = sn.u;
    return matmul(x, sn.weight, true) + bias;
}

Value GruCell::step(const Value& x, const Value& h) const {
    const std::size_t H = hidden;
    Value xw = matmul(x, w_input, true) + bias;
    Value hu = matmul(h, w_hidden, true);
    Value r = sigmoid(slice(xw, 1, 0, H) + slice(hu, 1, 0, H));
    Value z = sigmoid(slice(xw, 1, H, 2 * H) + slice(hu, 1, H, 2 * H));
    Value cand = tanh(slice(xw, 1, 2 * H, 3 * H) + matmul(r * h, w_candidate, true));
    return h + z * (cand - h);
}

Affine make_affine(ParamStore& store, const std::string& name, const std::string& group, std::size_t in,
                   std::size_t out, std::mt19937_64& rng) {
    Affine a;
    a.weight = store.add(name + ".weight", group, init_uniform({out, in}, in, rng));
    a.bias = store.add(name + ".bias", group, init_uniform({1, out}, in, rng));
    return a;
}

WeightNormAffine make_weight_norm_affine(ParamStore& store, const std::string& name, const std::string& group,
                                         std::size_t in, std::size_t out, std::mt19937_64& rng) {
    Tensor v = init_uniform({out, in}, in, rng);
    Tensor g(Shape{out, 1}, 0.0);
    for (std::size_t r = 0; r < out; ++r) {
        double sq = 0.0;
        for (std::size_t c = 0; c < in; ++c) sq += v.at(r, c) * v.at(r, c);
        g.data[r] = std::sqrt(sq);
    }
    WeightNormAffine a;
    a.direction = store.add(name + ".direction", group, std::move(v));
    a.scale = store.add(name + ".scale", group, std::move(g));
    a.bias = store.add(name + ".bias", group, init_uniform({1, out}, in, rng));
    return a;
}

SpectralNormAffine make_spectral_norm_affine(ParamStore& store, const std::string& name, const std::string& group,
                                             std::size_t in, std::size_t out, std::mt19937_64& rng) {
    SpectralNormAffine a;
    a.weight = store.add(name + ".weight", group, init_uniform({out, in}, in, rng));
    a.bias = store.add(name + ".bias", group, init_uniform({1, out}, in, rng));
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> u(out);
    for (double& x : u) x = nd(rng);
    normalize(u);
    a.u = Tensor(Shape{out}, std::move(u));
    return a;
}

GruCell make_gru(ParamStore& store, const std::string& name, const std::string& group, std::size_t in,
                 std::size_t hidden, std::mt19937_64& rng) {
    GruCell g;
    g.hidden = hidden;
    g.w_input = store.add(name + ".w_input", group, init_uniform({3 * hidden, in}, hidden, rng));
    g.w_hidden = store.add(name + ".w_hidden", group, init_uniform({2 * hidden, hidden}, hidden, rng));
    g.w_candidate = store.add(name + ".w_candidate", group, init_uniform({hidden, hidden}, hidden, rng));
    g.bias = store.add(name + ".bias", group, init_uniform({1, 3 * hidden}, hidden, rng));
    return g;
}

Affine bind_affine(const ParamStore& store, const std::string& name) {
    return Affine{store.get(name + ".weight"), store.get(name + ".bias")};
}

WeightNormAffine bind_weight_norm_affine(const ParamStore& store, const std::string& name) {
    return WeightNormAffine{store.get(name + ".direction"), store.get(name + ".scale"), store.get(name + ".bias")};
}

SpectralNormAffine bind_spectral_norm_affine(const ParamStore& store, const std::string& name, Tensor u) {
    SpectralNormAffine a;
    a.weight = store.get(name + ".weight");
    a.bias = store.get(name + ".bias");
    a.u = std::move(u);
    return a;
}

GruCell bind_gru(const ParamStore& store, const std::string& name) {
    GruCell g;
    g.w_input = store.get(name + ".w_input");
    g.w_hidden = store.get(name + ".w_hidden");
    g.w_candidate = store.get(name + ".w_candidate");
    g.bias = store.get(name + ".bias");
    g.hidden = g.w_candidate.shape()[0];
    return g;
}

double grad_check(const std::function<Value()>& f, std::vector<Value>& params, double eps) {
    Value loss = f();
    if (!std::isfinite(loss.item())) throw GradCheckError("grad_check: loss is non-finite at the base point", 0, 0);
    Gradients grads = backward(loss);
    std::vector<Tensor> analytic;
    for (const auto& p : params) analytic.push_back(grads.of(p));

    NoGradGuard guard;
    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& data = params[pi].mutable_data().data;
        for (std::size_t e = 0; e < data.size(); ++e) {
            const double orig = data[e];
            data[e] = orig + eps;
            double up = f().item();
            data[e] = orig - eps;
            double down = f().item();
            data[e] = orig;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw GradCheckError("grad_check: non-finite value at parameter " + std::to_string(pi) +
                                         ", element " + std::to_string(e),
                                     pi, e);
            }
            double numeric = (up - down) / (2.0 * eps);
            double err = std::abs(analytic[pi].data[e] - numeric) / std::max(1.0, std::abs(numeric));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace cfseq
