#include "cfseq/evalkit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "cfseq/diffcore/nn.hpp"
#include "cfseq/diffcore/optim.hpp"
#include "cfseq/encoder/features.hpp"

namespace cfseq {

const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::sliding: return "sliding";
        case Strategy::random: return "random";
        case Strategy::factual: return "factual";
    }
    return "?";
}

Strategy parse_strategy(const std::string& s) {
    if (s == "sliding") return Strategy::sliding;
    if (s == "random") return Strategy::random;
    if (s == "factual") return Strategy::factual;
    throw std::invalid_argument("unknown strategy '" + s + "' (expected sliding, random or factual)");
}

CounterfactualOracle::CounterfactualOracle(const CohortMeta& meta) : generator_(meta.generator) {
    if (generator_ == "tumor")
        tumor_ = TumorConfig::from_kv(meta.config);
    else if (generator_ == "ehr")
        ehr_ = EHRGenConfig::from_kv(meta.config);
    else
        throw std::invalid_argument("counterfactual oracle: unknown generator '" + generator_ + "'");
}

std::vector<double> CounterfactualOracle::operator()(const Trajectory& unit, std::size_t origin,
                                                     const std::vector<int>& plan) const {
    if (!unit.sim_state) {
        throw std::invalid_argument("counterfactual oracle: unit " + std::to_string(unit.unit_id) +
                                    " has no simulator state");
    }
    if (plan.empty()) return {};
    if (origin + plan.size() >= unit.sim_state->steps.size()) {
        throw std::invalid_argument("counterfactual oracle: origin + plan runs past the simulated length");
    }
    std::vector<int> codes(unit.w.begin(), unit.w.begin() + static_cast<std::ptrdiff_t>(origin + 1));
    codes.insert(codes.end(), plan.begin(), plan.end());
    std::vector<double> path = tumor_ ? tumor_rollout(*tumor_, *unit.sim_state, codes)
                                      : ehr_rollout(*ehr_, *unit.sim_state, codes);
    return std::vector<double>(path.begin() + static_cast<std::ptrdiff_t>(origin + 1), path.end());
}

std::vector<std::size_t> query_origins(const Trajectory& unit, std::size_t tau, std::size_t stride) {
    if (tau < 1) throw std::invalid_argument("query generation: tau must be at least 1");
    if (stride < 1) stride = 1;
    std::vector<std::size_t> out;
    for (std::size_t t = 0; t + tau < unit.active_len; t += stride) out.push_back(t);
    return out;
}

namespace {

void attach_truth(const Cohort& cohort, std::vector<CFQuery>& qs) {
    if (qs.empty() || !cohort.units[qs.front().unit].sim_state) return;
    CounterfactualOracle oracle(cohort.meta);
    for (auto& q : qs) q.ground_truth = oracle(cohort.units[q.unit], q.origin, q.plan);
}

}  // namespace

std::vector<CFQuery> gen_queries_sliding(const Cohort& cohort, std::size_t tau, std::size_t stride) {
    std::vector<CFQuery> qs;
    for (std::size_t i = 0; i < cohort.units.size(); ++i) {
        const Trajectory& u = cohort.units[i];
        for (std::size_t t : query_origins(u, tau, stride))
            for (std::size_t k = 1; k < cohort.meta.n_treatments; ++k)
                for (std::size_t d = 0; d < tau; ++d) {
                    CFQuery q{u.unit_id, i, t, std::vector<int>(tau, 0), std::nullopt, Strategy::sliding};
                    q.plan[d] = static_cast<int>(k);
                    qs.push_back(std::move(q));
                }
    }
    attach_truth(cohort, qs);
    return qs;
}

std::vector<CFQuery> gen_queries_random(const Cohort& cohort, std::size_t tau, std::uint64_t seed,
                                        std::size_t stride) {
    Rng rng = substream(seed, "queries");
    const auto k = static_cast<std::int64_t>(cohort.meta.n_treatments);
    std::vector<CFQuery> qs;
    for (std::size_t i = 0; i < cohort.units.size(); ++i) {
        const Trajectory& u = cohort.units[i];
        for (std::size_t t : query_origins(u, tau, stride)) {
            CFQuery q{u.unit_id, i, t, std::vector<int>(tau, 0), std::nullopt, Strategy::random};
            for (int& c : q.plan) c = static_cast<int>(uniform_int(rng, 0, k - 1));
            qs.push_back(std::move(q));
        }
    }
    attach_truth(cohort, qs);
    return qs;
}

std::vector<CFQuery> gen_queries_factual(const Cohort& cohort, std::size_t tau, std::size_t stride) {
    std::vector<CFQuery> qs;
    for (std::size_t i = 0; i < cohort.units.size(); ++i) {
        const Trajectory& u = cohort.units[i];
        for (std::size_t t : query_origins(u, tau, stride)) {
            CFQuery q{u.unit_id, i, t, {}, std::nullopt, Strategy::factual};
            q.plan.assign(u.w.begin() + static_cast<std::ptrdiff_t>(t + 1),
                          u.w.begin() + static_cast<std::ptrdiff_t>(t + 1 + tau));
            // Recorded outcomes are the ground truth of the factual plan.
            q.ground_truth = std::vector<double>(u.y.begin() + static_cast<std::ptrdiff_t>(t + 1),
                                                 u.y.begin() + static_cast<std::ptrdiff_t>(t + 1 + tau));
            qs.push_back(std::move(q));
        }
    }
    return qs;
}

std::vector<CFQuery> gen_queries(Strategy s, const Cohort& cohort, std::size_t tau, std::uint64_t seed,
                                 std::size_t stride) {
    switch (s) {
        case Strategy::sliding: return gen_queries_sliding(cohort, tau, stride);
        case Strategy::random: return gen_queries_random(cohort, tau, seed, stride);
        case Strategy::factual: return gen_queries_factual(cohort, tau, stride);
    }
    return {};
}

std::size_t workers_from_env() {
    const char* s = std::getenv("CFSEQ_WORKERS");
    if (!s || !*s) return 1;
    char* end = nullptr;
    const long v = std::strtol(s, &end, 10);
    if (*end != '\0' || v < 1) throw std::invalid_argument("CFSEQ_WORKERS must be a positive integer");
    return static_cast<std::size_t>(v);
}

std::vector<std::vector<double>> predict_queries(const Model& model, const Cohort& cohort,
                                                 const std::vector<CFQuery>& queries, std::size_t workers) {
    std::map<std::size_t, std::vector<std::size_t>> by_unit;
    for (std::size_t q = 0; q < queries.size(); ++q) by_unit[queries[q].unit].push_back(q);
    std::vector<std::vector<std::size_t>> chunks;
    for (auto& [unit, ids] : by_unit) chunks.push_back(std::move(ids));

    std::vector<std::vector<double>> out(queries.size());
    auto run = [&](std::size_t c) {
        std::vector<PredictItem> items;
        for (std::size_t q : chunks[c]) items.push_back({queries[q].unit, queries[q].origin, queries[q].plan});
        auto pred = predict_counterfactual(model, cohort, items);
        for (std::size_t a = 0; a < chunks[c].size(); ++a) out[chunks[c][a]] = std::move(pred[a]);
    };
    workers = std::max<std::size_t>(1, std::min(workers, chunks.size()));
    if (workers == 1) {
        for (std::size_t c = 0; c < chunks.size(); ++c) run(c);
        return out;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t c = w; c < chunks.size(); c += workers) run(c);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

HorizonErrors rmse_by_horizon(const std::vector<std::vector<double>>& predictions,
                              const std::vector<CFQuery>& queries) {
    if (predictions.size() != queries.size()) throw std::invalid_argument("rmse_by_horizon: size mismatch");
    HorizonErrors h;
    std::vector<double> se;
    for (std::size_t q = 0; q < queries.size(); ++q) {
        if (!queries[q].ground_truth) throw std::invalid_argument("rmse_by_horizon: query without ground truth");
        const auto& gt = *queries[q].ground_truth;
        if (predictions[q].size() != gt.size()) {
            throw std::invalid_argument("rmse_by_horizon: prediction and ground truth lengths differ");
        }
        if (gt.size() > se.size()) {
            se.resize(gt.size(), 0.0);
            h.count.resize(gt.size(), 0);
        }
        for (std::size_t j = 0; j < gt.size(); ++j) {
            const double d = predictions[q][j] - gt[j];
            se[j] += d * d;
            ++h.count[j];
        }
    }
    h.rmse.resize(se.size());
    for (std::size_t j = 0; j < se.size(); ++j) h.rmse[j] = std::sqrt(se[j] / static_cast<double>(h.count[j]));
    return h;
}

std::vector<double> nrmse(const std::vector<double>& rmse, double normalization) {
    if (!(normalization > 0.0)) throw std::invalid_argument("nrmse: normalization must be positive");
    std::vector<double> out(rmse.size());
    for (std::size_t j = 0; j < rmse.size(); ++j) out[j] = rmse[j] / normalization;
    return out;
}

double normalization_constant(const Cohort& cohort) {
    double m = -std::numeric_limits<double>::infinity();
    for (const auto& u : cohort.units)
        for (std::size_t t = 0; t < u.active_len; ++t) m = std::max(m, u.y[t]);
    if (!std::isfinite(m)) throw std::invalid_argument("normalization_constant: empty cohort");
    return m;
}

Cohort mask_confounders(const Cohort& cohort, const std::vector<std::size_t>& columns) {
    for (std::size_t c : columns)
        if (c >= cohort.meta.d_x) {
            throw std::out_of_range("mask_confounders: covariate index " + std::to_string(c) + " out of range (d_x = " +
                                    std::to_string(cohort.meta.d_x) + ")");
        }
    Cohort out = cohort;
    for (auto& u : out.units)
        for (auto& row : u.x)
            for (std::size_t c : columns) row[c] = 0.0;
    return out;
}

ProbeResult fit_probe(const Tensor& features, const std::vector<int>& labels, std::size_t n_classes,
                      std::uint64_t seed, double train_fraction, std::size_t hidden, std::size_t steps) {
    const std::size_t n = features.rows(), d = features.cols();
    if (labels.size() != n) throw std::invalid_argument("fit_probe: label count differs from feature rows");
    const auto n_train = static_cast<std::size_t>(train_fraction * static_cast<double>(n));
    if (n_train < 2 || n_train >= n) throw std::invalid_argument("fit_probe: need rows on both sides of the split");

    std::vector<double> mu(d, 0.0), sd(d, 0.0);
    for (std::size_t i = 0; i < n_train; ++i)
        for (std::size_t c = 0; c < d; ++c) mu[c] += features.at(i, c);
    for (double& m : mu) m /= static_cast<double>(n_train);
    for (std::size_t i = 0; i < n_train; ++i)
        for (std::size_t c = 0; c < d; ++c) sd[c] += std::pow(features.at(i, c) - mu[c], 2);
    for (double& s : sd) s = s > 0.0 ? std::sqrt(s / static_cast<double>(n_train)) : 1.0;
    for (double& s : sd) s = s < 1e-12 ? 1.0 : s;
    auto standardized = [&](std::size_t begin, std::size_t end) {
        Tensor t(Shape{end - begin, d}, 0.0);
        for (std::size_t i = begin; i < end; ++i)
            for (std::size_t c = 0; c < d; ++c) t.at(i - begin, c) = (features.at(i, c) - mu[c]) / sd[c];
        return t;
    };
    // The last fifth of the training rows picks the stopping step.
    const std::size_t n_fit = std::max<std::size_t>(1, n_train - n_train / 5);
    Value xtr = constant(standardized(0, n_fit));
    Value xva = constant(standardized(n_fit, n_train));
    Value xte = constant(standardized(n_train, n));
    std::vector<std::size_t> ytr(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n_fit));
    std::vector<std::size_t> yva(labels.begin() + static_cast<std::ptrdiff_t>(n_fit),
                                 labels.begin() + static_cast<std::ptrdiff_t>(n_train));

    Rng rng = substream(seed, "probe");
    ParamStore store;
    Affine a = make_affine(store, "probe.1", "probe", d, hidden, rng);
    Affine b = make_affine(store, "probe.2", "probe", hidden, n_classes, rng);
    std::vector<Value> params = store.all();
    OptimizerState state;
    const AdamWConfig opt{1e-2, 0.9, 0.999, 1e-8, 1e-4};
    auto val_loss = [&] {
        NoGradGuard guard;
        return yva.empty() ? 0.0 : -mean(one_hot_gather(log_softmax(b(selu(a(xva)))), yva)).item();
    };
    auto snapshot = [&] {
        std::vector<Tensor> out;
        for (const Value& p : params) out.push_back(p.data());
        return out;
    };
    double best = val_loss();
    std::vector<Tensor> best_params = snapshot();
    for (std::size_t s = 0; s < steps; ++s) {
        Value loss = -mean(one_hot_gather(log_softmax(b(selu(a(xtr)))), ytr));
        Gradients g = backward(loss);
        if (!adamw_step(params, collect_grads(g, params), state, opt)) break;
        const double v = val_loss();
        if (v < best) best = v, best_params = snapshot();
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i].mutable_data() = best_params[i];

    NoGradGuard guard;
    Value logp = log_softmax(b(selu(a(xte))));
    std::vector<double> freq(n_classes, 0.0);
    for (std::size_t i = 0; i < n_train; ++i) freq[static_cast<std::size_t>(labels[i])] += 1.0;
    const std::size_t majority = static_cast<std::size_t>(std::max_element(freq.begin(), freq.end()) - freq.begin());
    ProbeResult r;
    const std::size_t n_test = n - n_train;
    for (std::size_t i = 0; i < n_test; ++i) {
        const auto y = static_cast<std::size_t>(labels[n_train + i]);
        std::size_t arg = 0;
        for (std::size_t c = 1; c < n_classes; ++c)
            if (logp.data().at(i, c) > logp.data().at(i, arg)) arg = c;
        r.accuracy += arg == y ? 1.0 : 0.0;
        r.majority_rate += y == majority ? 1.0 : 0.0;
        r.log_likelihood += logp.data().at(i, y);
    }
    r.accuracy /= static_cast<double>(n_test);
    r.majority_rate /= static_cast<double>(n_test);
    r.log_likelihood /= static_cast<double>(n_test);
    for (double f : freq)
        if (f > 0.0) r.marginal_entropy -= f / static_cast<double>(n_train) * std::log(f / static_cast<double>(n_train));
    return r;
}

Tensor history_features(const Cohort& cohort, const Normalizer& norm,
                        const std::vector<std::pair<std::size_t, std::size_t>>& unit_origins, std::size_t window) {
    const std::size_t dc = norm.component_dim();
    Tensor out(Shape{unit_origins.size(), window * dc}, 0.0);
    for (std::size_t r = 0; r < unit_origins.size(); ++r) {
        const auto [unit, t] = unit_origins[r];
        const Trajectory& u = cohort.units.at(unit);
        for (std::size_t k = 0; k < window && k <= t; ++k)
            write_component(u, t - k, norm, &out.data[r * window * dc + k * dc]);
    }
    return out;
}

}  // namespace cfseq
