#include "cfseq/decoder/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <map>
#include <numeric>

#include "cfseq/diffcore/optim.hpp"
#include "cfseq/evalkit/early_stop.hpp"

namespace cfseq {

const char* balancing_name(Balancing b) {
    switch (b) {
        case Balancing::club: return "club";
        case Balancing::none: return "none";
        case Balancing::cdc: return "cdc";
    }
    return "?";
}

Balancing parse_balancing(const std::string& s) {
    if (s == "club") return Balancing::club;
    if (s == "none") return Balancing::none;
    if (s == "cdc") return Balancing::cdc;
    throw std::invalid_argument("unknown balancing '" + s + "' (expected club, none or cdc)");
}

Decoder Decoder::init(std::size_t c_dim, std::size_t d_v, std::size_t k, const DecoderConfig& cfg, Rng& rng) {
    ParamStore s;
    const std::size_t r = cfg.r_dim;
    make_affine(s, "dec.phi", "dec.phi", c_dim, r, rng);
    make_gru(s, "dec.gru", "dec.gru", k + cfg.plan_hidden + 1 + d_v, r, rng);
    make_gru(s, "dec.plan", "dec.plan", k, cfg.plan_hidden, rng);
    make_affine(s, "dec.rep", "dec.rep", r, r, rng);
    make_weight_norm_affine(s, "dec.y1", "dec.outcome", r + k, cfg.head_hidden, rng);
    make_weight_norm_affine(s, "dec.y2", "dec.outcome", cfg.head_hidden, 1, rng);
    SpectralNormAffine a = make_spectral_norm_affine(s, "dec.w1", "dec.treatment", r, cfg.cls_hidden, rng);
    SpectralNormAffine b = make_spectral_norm_affine(s, "dec.w2", "dec.treatment", cfg.cls_hidden, k, rng);
    return bind(std::move(s), d_v, k, a.u, b.u);
}

Decoder Decoder::bind(ParamStore store, std::size_t d_v, std::size_t k, Tensor u1, Tensor u2) {
    Decoder d;
    d.store = std::move(store);
    d.phi = bind_affine(d.store, "dec.phi");
    d.gru = bind_gru(d.store, "dec.gru");
    d.plan = bind_gru(d.store, "dec.plan");
    d.rep = bind_affine(d.store, "dec.rep");
    d.y1 = bind_weight_norm_affine(d.store, "dec.y1");
    d.y2 = bind_weight_norm_affine(d.store, "dec.y2");
    d.w1 = bind_spectral_norm_affine(d.store, "dec.w1", std::move(u1));
    d.w2 = bind_spectral_norm_affine(d.store, "dec.w2", std::move(u2));
    d.c_dim = d.phi.weight.shape()[1];
    d.r_dim = d.phi.weight.shape()[0];
    d.plan_hidden = d.plan.hidden;
    d.d_v = d_v;
    d.n_treatments = k;
    if (d.gru.w_input.shape()[1] != k + d.plan_hidden + 1 + d_v) {
        throw ShapeError("decoder: dec.gru input width does not match K + plan hidden + 1 + d_v");
    }
    return d;
}

Decoder Decoder::clone() const { return bind(store.clone(), d_v, n_treatments, w1.u, w2.u); }

std::vector<Value> Decoder::outcome_side_params() const {
    return store.groups({"dec.phi", "dec.gru", "dec.plan", "dec.rep", "dec.outcome"});
}

std::vector<Value> Decoder::treatment_params() const { return store.group("dec.treatment"); }

Value represent(const Decoder& dec, const Value& c_t) { return selu(dec.phi(c_t)); }

Value ClassifierWeights::logits(const Value& phi) const {
    return matmul(selu(matmul(phi, w1, true) + b1), w2, true) + b2;
}

namespace {

ClassifierWeights make_weights(const SpectralNormAffine& a, const SpectralNormAffine& b, Tensor* ua, Tensor* ub,
                               bool detach) {
    const int it_a = ua ? a.power_iterations : 0;
    const int it_b = ub ? b.power_iterations : 0;
    ClassifierWeights cw;
    if (detach) {
        NoGradGuard guard;
        SpectralNormResult ra = spectral_norm_apply(a.weight, a.u, it_a);
        SpectralNormResult rb = spectral_norm_apply(b.weight, b.u, it_b);
        if (ua) *ua = ra.u;
        if (ub) *ub = rb.u;
        cw.w1 = constant(ra.weight.data());
        cw.w2 = constant(rb.weight.data());
        cw.b1 = constant(a.bias.data());
        cw.b2 = constant(b.bias.data());
        return cw;
    }
    SpectralNormResult ra = spectral_norm_apply(a.weight, a.u, it_a);
    SpectralNormResult rb = spectral_norm_apply(b.weight, b.u, it_b);
    if (ua) *ua = ra.u;
    if (ub) *ub = rb.u;
    cw.w1 = ra.weight;
    cw.w2 = rb.weight;
    cw.b1 = a.bias;
    cw.b2 = b.bias;
    return cw;
}

Tensor one_hot_rows(const std::vector<int>& codes, std::size_t k) {
    Tensor t(Shape{codes.size(), k}, 0.0);
    for (std::size_t i = 0; i < codes.size(); ++i) {
        auto oh = one_hot(codes[i], k);
        std::copy(oh.begin(), oh.end(), t.data.begin() + static_cast<std::ptrdiff_t>(i * k));
    }
    return t;
}

}  // namespace

ClassifierWeights classifier_weights(Decoder& dec, bool update_u, bool detach) {
    return make_weights(dec.w1, dec.w2, update_u ? &dec.w1.u : nullptr, update_u ? &dec.w2.u : nullptr, detach);
}

ClassifierWeights classifier_weights(const Decoder& dec, bool detach) {
    return make_weights(dec.w1, dec.w2, nullptr, nullptr, detach);
}

RolloutResult decode_rollout(const Decoder& dec, const RolloutInputs& in, const ClassifierWeights* cls) {
    const std::size_t m = in.w_t.size();
    if (in.plan.size() != m || in.y_t.shape != Shape{m, 1} || in.v.shape != Shape{m, dec.d_v} ||
        in.phi_t.shape() != Shape{m, dec.r_dim}) {
        throw ShapeError("decode_rollout: inputs disagree on the number of rows");
    }
    if (m == 0) return {};
    const std::size_t tau = in.plan.front().size();
    if (tau < 1) throw std::invalid_argument("decode_rollout: plan length must be at least 1");
    for (const auto& p : in.plan)
        if (p.size() != tau) throw std::invalid_argument("decode_rollout: plans must share one length");
    const std::size_t k = dec.n_treatments;

    RolloutResult r;
    Value v = constant(in.v);
    Value plan_h = dec.plan.step(constant(one_hot_rows(in.w_t, k)), constant(Tensor(Shape{m, dec.plan_hidden}, 0.0)));
    Value y_prev = constant(in.y_t);
    Value h = dec.gru.step(concat({constant(one_hot_rows(in.w_t, k)), plan_h, y_prev, v}, 1), in.phi_t);
    Value phi_prev = selu(dec.rep(h));
    r.phi_start = phi_prev;
    std::vector<int> codes(m);
    for (std::size_t j = 1; j <= tau; ++j) {
        for (std::size_t i = 0; i < m; ++i) codes[i] = in.plan[i][j - 1];
        Value om = constant(one_hot_rows(codes, k));
        Value y_hat = dec.y2(selu(dec.y1(concat({phi_prev, om}, 1))));
        r.y_hat.push_back(y_hat);
        if (cls) r.logits.push_back(cls->logits(stop_gradient(phi_prev)));
        if (j == tau) break;
        plan_h = dec.plan.step(om, plan_h);
        h = dec.gru.step(concat({om, plan_h, y_prev, v}, 1), h);
        phi_prev = selu(dec.rep(h));
        r.phi.push_back(phi_prev);
        y_prev = y_hat;
    }
    return r;
}

Value outcome_nll(const std::vector<Value>& y_hat, const Tensor& targets, const Tensor& mask, double sigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("outcome_nll: sigma must be positive");
    if (y_hat.empty()) throw std::invalid_argument("outcome_nll: empty prediction sequence");
    const std::size_t m = y_hat.front().shape()[0], tau = y_hat.size();
    if (targets.shape != Shape{m, tau} || mask.shape != Shape{m, tau}) {
        throw ShapeError("outcome_nll: targets/mask " + to_string(targets.shape) + " for " + std::to_string(m) +
                         " rows x " + std::to_string(tau) + " steps");
    }
    const double c = std::log(sigma * std::sqrt(2.0 * std::numbers::pi));
    const double inv = 1.0 / (2.0 * sigma * sigma);
    Value total;
    for (std::size_t j = 0; j < tau; ++j) {
        Tensor yj(Shape{m, 1}, 0.0), mj(Shape{m, 1}, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
            yj.data[i] = targets.at(i, j);
            mj.data[i] = mask.at(i, j);
        }
        Value d = y_hat[j] - constant(std::move(yj));
        Value term = sum((d * d * inv + c) * constant(std::move(mj))) * (1.0 / static_cast<double>(m));
        total = total.valid() ? total + term : term;
    }
    return total;
}

Value treatment_ce(const std::vector<Value>& logits, const std::vector<std::vector<int>>& targets) {
    if (logits.empty()) throw std::invalid_argument("treatment_ce: no logits");
    const std::size_t m = logits.front().shape()[0];
    if (targets.size() != m) throw ShapeError("treatment_ce: target rows differ from logits");
    Value total;
    for (std::size_t j = 0; j < logits.size(); ++j) {
        std::vector<std::size_t> idx(m);
        for (std::size_t i = 0; i < m; ++i) idx[i] = static_cast<std::size_t>(targets[i][j]);
        Value term = -mean(one_hot_gather(log_softmax(logits[j]), idx));
        total = total.valid() ? total + term : term;
    }
    return total * (1.0 / static_cast<double>(logits.size()));
}

ClubValue club_estimate(const Value& logits, const std::vector<int>& w, const std::vector<std::size_t>& perm) {
    const std::size_t n = w.size();
    if (n < 2) throw std::invalid_argument("club_estimate: need at least 2 units");
    if (perm.size() != n || logits.shape().size() != 2 || logits.shape()[0] != n) {
        throw ShapeError("club_estimate: logits, treatments and permutation disagree");
    }
    const double floor = std::log(1e-12);
    Value logp = log_softmax(logits);
    ClubValue out;
    for (double v : logp.data().data)
        if (v < floor) ++out.floored;
    Value lq = clamp_min(logp, floor);
    std::vector<std::size_t> pos(n), neg(n);
    for (std::size_t i = 0; i < n; ++i) {
        pos[i] = static_cast<std::size_t>(w[i]);
        neg[i] = static_cast<std::size_t>(w[perm[i]]);
    }
    out.value = mean(one_hot_gather(lq, pos)) - mean(one_hot_gather(lq, neg));
    return out;
}

std::vector<std::size_t> draw_permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    if (n < 2) return p;
    for (;;) {
        for (std::size_t i = n; i > 1; --i)
            std::swap(p[i - 1], p[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i - 1)))]);
        for (std::size_t i = 0; i < n; ++i)
            if (p[i] != i) return p;
    }
}

Model Model::clone() const { return Model{norm, enc.clone(), dec.clone(), tau, sigma, config_fingerprint}; }

namespace {

struct Encoded {
    std::vector<Value> c;  // per step, [n x c_dim]
    std::size_t n = 0;
    Value stacked() const { return concat(std::span<const Value>(c), 0); }
};

Encoded encode_units(const Encoder& enc, const Cohort& cohort, const std::vector<std::size_t>& units,
                     std::size_t len, const Normalizer& norm) {
    SequenceBatch b = make_sequence_batch(cohort, units, len, norm);
    auto z = local_features(enc, b, len);
    return Encoded{encode_context(enc, z, b.mask), units.size()};
}

struct OriginItem {
    std::size_t row = 0;  // index into the encoded batch
    std::size_t unit = 0;
    std::size_t origin = 0;
};

RolloutInputs build_inputs(const Value& phi_t, const Cohort& cohort, const Normalizer& norm,
                           const std::vector<OriginItem>& items, const std::vector<std::vector<int>>& plans) {
    const std::size_t m = items.size(), dv = norm.d_v();
    RolloutInputs in;
    in.phi_t = phi_t;
    in.v = Tensor(Shape{m, dv}, 0.0);
    in.y_t = Tensor(Shape{m, 1}, 0.0);
    in.w_t.resize(m);
    in.plan = plans;
    for (std::size_t i = 0; i < m; ++i) {
        const Trajectory& u = cohort.units[items[i].unit];
        for (std::size_t d = 0; d < dv; ++d) in.v.data[i * dv + d] = (u.v[d] - norm.v_mean[d]) / norm.v_sd[d];
        in.y_t.data[i] = norm.scale_y(u.y[items[i].origin]);
        in.w_t[i] = u.w[items[i].origin];
    }
    return in;
}

std::size_t usable_origins(const Trajectory& u, std::size_t tau) {
    return u.active_len > tau ? u.active_len - tau : 0;  // origins 0..active_len-tau-1
}

}  // namespace

double factual_mse(const Model& model, const Cohort& cohort, std::size_t stride) {
    NoGradGuard guard;
    if (stride == 0) stride = 1;
    std::vector<PredictItem> items;
    std::vector<std::vector<double>> truth;
    for (std::size_t i = 0; i < cohort.units.size(); ++i) {
        const Trajectory& u = cohort.units[i];
        for (std::size_t t = 0; t < usable_origins(u, model.tau); t += stride) {
            items.push_back({i, t, std::vector<int>(u.w.begin() + static_cast<std::ptrdiff_t>(t + 1),
                                                    u.w.begin() + static_cast<std::ptrdiff_t>(t + 1 + model.tau))});
            truth.emplace_back(u.y.begin() + static_cast<std::ptrdiff_t>(t + 1),
                               u.y.begin() + static_cast<std::ptrdiff_t>(t + 1 + model.tau));
        }
    }
    if (items.empty()) throw std::invalid_argument("factual_mse: cohort has no usable origins");
    auto pred = predict_counterfactual(model, cohort, items);
    double se = 0.0, n = 0.0;
    for (std::size_t q = 0; q < items.size(); ++q)
        for (std::size_t j = 0; j < model.tau; ++j) {
            const double d = model.norm.scale_y(pred[q][j]) - model.norm.scale_y(truth[q][j]);
            se += d * d;
            n += 1.0;
        }
    return se / n;
}

std::vector<std::vector<double>> predict_counterfactual(const Model& model, const Cohort& cohort,
                                                        const std::vector<PredictItem>& items) {
    NoGradGuard guard;
    std::vector<std::vector<double>> out(items.size());
    for (const auto& it : items) {
        if (it.unit >= cohort.units.size()) throw std::out_of_range("predict_counterfactual: unit index out of range");
        if (it.plan.empty() || it.plan.size() > model.tau) {
            throw std::invalid_argument("predict_counterfactual: plan length must be in 1..tau");
        }
        if (it.origin >= cohort.units[it.unit].active_len) {
            throw std::invalid_argument("predict_counterfactual: origin beyond the observed history");
        }
        for (int c : it.plan)
            if (c < 0 || static_cast<std::size_t>(c) >= model.dec.n_treatments)
                throw std::invalid_argument("predict_counterfactual: invalid treatment code " + std::to_string(c));
    }
    // Each unit is encoded alone up to its largest origin and each item is
    // rolled out alone, so results never depend on how items are grouped.
    std::vector<std::size_t> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return items[a].unit < items[b].unit; });
    std::size_t pos = 0;
    while (pos < order.size()) {
        const std::size_t unit = items[order[pos]].unit;
        std::size_t end = pos;
        std::size_t max_origin = 0;
        while (end < order.size() && items[order[end]].unit == unit) {
            max_origin = std::max(max_origin, items[order[end]].origin);
            ++end;
        }
        Encoded e = encode_units(model.enc, cohort, {unit}, max_origin + 1, model.norm);
        // Group this unit's items by plan length; rows are independent.
        std::map<std::size_t, std::vector<std::size_t>> by_len;
        for (std::size_t q = pos; q < end; ++q) by_len[items[order[q]].plan.size()].push_back(order[q]);
        for (const auto& [len, ids] : by_len) {
            std::vector<OriginItem> oi;
            std::vector<std::vector<int>> plans;
            std::vector<Value> rows;
            for (std::size_t id : ids) {
                oi.push_back({0, unit, items[id].origin});
                plans.push_back(items[id].plan);
                rows.push_back(e.c[items[id].origin]);
            }
            Value c_t = concat(std::span<const Value>(rows), 0);
            RolloutResult r = decode_rollout(model.dec, build_inputs(represent(model.dec, c_t), cohort, model.norm, oi, plans));
            for (std::size_t a = 0; a < ids.size(); ++a) {
                out[ids[a]].resize(len);
                for (std::size_t j = 0; j < len; ++j) out[ids[a]][j] = model.norm.unscale_y(r.y_hat[j].data().data[a]);
            }
        }
        pos = end;
    }
    return out;
}

Tensor representations(const Model& model, const Cohort& cohort,
                       const std::vector<std::pair<std::size_t, std::size_t>>& unit_origins) {
    NoGradGuard guard;
    Tensor out(Shape{unit_origins.size(), model.dec.r_dim}, 0.0);
    std::map<std::size_t, std::vector<std::size_t>> by_unit;
    for (std::size_t i = 0; i < unit_origins.size(); ++i) by_unit[unit_origins[i].first].push_back(i);
    for (const auto& [unit, ids] : by_unit) {
        std::size_t max_origin = 0;
        for (std::size_t id : ids) max_origin = std::max(max_origin, unit_origins[id].second);
        Encoded e = encode_units(model.enc, cohort, {unit}, max_origin + 1, model.norm);
        for (std::size_t id : ids) {
            const std::size_t origin = unit_origins[id].second;
            RolloutResult r = decode_rollout(model.dec, build_inputs(represent(model.dec, e.c[origin]), cohort,
                                                                     model.norm, {{0, unit, origin}}, {{0}}));
            const auto& phi = r.phi_start.data().data;
            std::copy(phi.begin(), phi.end(), out.data.begin() + static_cast<std::ptrdiff_t>(id * model.dec.r_dim));
        }
    }
    return out;
}

TrainResult train_decoder(const Cohort& train, const Cohort& val, const Encoder& pretrained, const Normalizer& norm,
                          const DecoderConfig& cfg, std::uint64_t seed) {
    Rng init = substream(seed, "init", 1);
    TrainResult res;
    res.model.norm = norm;
    res.model.enc = pretrained.clone();
    res.model.dec = Decoder::init(pretrained.c_dim, norm.d_v(), norm.n_treatments, cfg, init);
    res.model.tau = pretrained.tau;
    res.model.sigma = cfg.sigma;
    Model& model = res.model;
    const std::size_t tau = model.tau;
    res.init_val_mse = factual_mse(model, val, cfg.val_origin_stride);
    if (cfg.max_epochs == 0) return res;

    std::vector<Value> dec_params = model.dec.outcome_side_params();
    std::vector<Value> enc_params = model.enc.representation_params();
    std::vector<Value> cls_params = model.dec.treatment_params();
    OptimizerState dec_state, enc_state, cls_state;
    const AdamWConfig dec_opt{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
    const AdamWConfig enc_opt{cfg.lr * cfg.encoder_lr_ratio, 0.9, 0.999, 1e-8, cfg.weight_decay};
    const MomentumConfig cls_opt{cfg.cls_lr, cfg.cls_momentum};

    EarlyStopMonitor monitor(cfg.min_delta, cfg.patience);
    std::vector<Tensor> best_enc = model.enc.store.snapshot(), best_dec = model.dec.store.snapshot();
    Tensor best_u1 = model.dec.w1.u, best_u2 = model.dec.w2.u;
    Rng batching = substream(seed, "batching", 1);
    Rng club_rng = substream(seed, "club");
    std::vector<std::size_t> order(train.units.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1],
                      order[static_cast<std::size_t>(uniform_int(batching, 0, static_cast<std::int64_t>(i - 1)))]);
        double sum_y = 0.0, sum_club = 0.0, sum_w = 0.0, correct = 0.0, seen = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<std::size_t> units(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(
                                                               std::min(order.size(), start + cfg.batch_size)));
            // Origins: ceil(fraction * usable) distinct steps per unit.
            std::vector<OriginItem> items;
            std::size_t len = 0;
            for (std::size_t row = 0; row < units.size(); ++row) {
                const Trajectory& u = train.units[units[row]];
                const std::size_t usable = usable_origins(u, tau);
                if (usable == 0) continue;
                const auto m = static_cast<std::size_t>(std::ceil(cfg.origin_fraction * static_cast<double>(usable)));
                std::vector<std::size_t> cand(usable);
                std::iota(cand.begin(), cand.end(), 0);
                for (std::size_t a = 0; a < m; ++a) {
                    std::size_t b = a + static_cast<std::size_t>(
                                            uniform_int(batching, 0, static_cast<std::int64_t>(usable - a - 1)));
                    std::swap(cand[a], cand[b]);
                    items.push_back({row, units[row], cand[a]});
                    len = std::max(len, cand[a] + 1);
                }
            }
            if (items.size() < 2) continue;
            const std::size_t m = items.size();
            Encoded e = encode_units(model.enc, train, units, len, norm);
            std::vector<std::size_t> idx(m);
            for (std::size_t i = 0; i < m; ++i) idx[i] = items[i].origin * e.n + items[i].row;
            Value c_t = gather_rows(e.stacked(), idx);
            std::vector<std::vector<int>> plans(m);
            Tensor targets(Shape{m, tau}, 0.0), mask(Shape{m, tau}, 1.0);
            for (std::size_t i = 0; i < m; ++i) {
                const Trajectory& u = train.units[items[i].unit];
                plans[i].assign(u.w.begin() + static_cast<std::ptrdiff_t>(items[i].origin + 1),
                                u.w.begin() + static_cast<std::ptrdiff_t>(items[i].origin + 1 + tau));
                for (std::size_t j = 0; j < tau; ++j) targets.at(i, j) = norm.scale_y(u.y[items[i].origin + 1 + j]);
            }
            ClassifierWeights live = classifier_weights(model.dec, true, false);
            ClassifierWeights frozen = classifier_weights(model.dec, false, true);
            Value phi_t = represent(model.dec, c_t);
            RolloutResult r = decode_rollout(model.dec, build_inputs(phi_t, train, norm, items, plans), &live);

            Value loss_y = outcome_nll(r.y_hat, targets, mask, cfg.sigma);
            Value balance;
            std::vector<Value> phis{r.phi_start};
            phis.insert(phis.end(), r.phi.begin(), r.phi.end());
            if (cfg.balancing != Balancing::none) {
                for (std::size_t j = 0; j < tau; ++j) {
                    std::vector<int> wj(m);
                    for (std::size_t i = 0; i < m; ++i) wj[i] = plans[i][j];
                    Value logits = frozen.logits(phis[j]);
                    Value term;
                    if (cfg.balancing == Balancing::club) {
                        term = club_estimate(logits, wj, draw_permutation(m, club_rng)).value;
                    } else {
                        // Uniform-target cross-entropy standing in for CDC.
                        term = -mean(log_softmax(logits));
                    }
                    balance = balance.valid() ? balance + term : term;
                }
                balance = balance * (1.0 / static_cast<double>(tau));
            }
            Value loss_dec = balance.valid() ? loss_y + balance * cfg.club_weight : loss_y;
            Value loss_w = treatment_ce(r.logits, plans);
            if (!std::isfinite(loss_dec.item()) || !std::isfinite(loss_w.item())) {
                throw TrainingAborted("train_decoder: non-finite loss at epoch " + std::to_string(epoch));
            }

            Gradients g_dec = backward(loss_dec);
            Gradients g_w = backward(loss_w);
            std::vector<Tensor> gd = collect_grads(g_dec, dec_params), ge = collect_grads(g_dec, enc_params);
            std::vector<Tensor> gw = collect_grads(g_w, cls_params);
            if (cfg.clip_norm > 0.0) {
                clip_grad_norm(gd, cfg.clip_norm);
                clip_grad_norm(ge, cfg.clip_norm);
                clip_grad_norm(gw, cfg.clip_norm);
            }
            if (!adamw_step(dec_params, gd, dec_state, dec_opt) || !adamw_step(enc_params, ge, enc_state, enc_opt) ||
                !sgd_momentum_step(cls_params, gw, cls_state, cls_opt)) {
                throw TrainingAborted("train_decoder: non-finite gradient at epoch " + std::to_string(epoch));
            }
            for (std::size_t j = 0; j < tau; ++j) {
                const Tensor& lg = r.logits[j].data();
                const std::size_t k = lg.cols();
                for (std::size_t i = 0; i < m; ++i) {
                    std::size_t arg = 0;
                    for (std::size_t c = 1; c < k; ++c)
                        if (lg.at(i, c) > lg.at(i, arg)) arg = c;
                    correct += arg == static_cast<std::size_t>(plans[i][j]) ? 1.0 : 0.0;
                    seen += 1.0;
                }
            }
            sum_y += loss_y.item();
            sum_club += balance.valid() ? balance.item() : 0.0;
            sum_w += loss_w.item();
            ++batches;
        }
        const double v = factual_mse(model, val, cfg.val_origin_stride);
        const double d = batches ? static_cast<double>(batches) : 1.0;
        res.log.push_back({epoch, sum_y / d, sum_club / d, sum_w / d, v, seen > 0 ? correct / seen : 0.0});
        const bool stop = monitor.update(v);
        if (monitor.improved_last()) {
            best_enc = model.enc.store.snapshot();
            best_dec = model.dec.store.snapshot();
            best_u1 = model.dec.w1.u;
            best_u2 = model.dec.w2.u;
            res.best_epoch = epoch;
        }
        res.epochs_run = epoch + 1;
        if (stop) break;
    }
    model.enc.store.restore(best_enc);
    model.dec.store.restore(best_dec);
    model.dec.w1.u = best_u1;
    model.dec.w2.u = best_u2;
    return res;
}

void write_train_log(const std::vector<TrainLogRow>& log, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "epoch,loss_y,club,loss_w,val_mse,cls_accuracy\n";
    for (const auto& r : log)
        out << r.epoch << ',' << format_double(r.loss_y) << ',' << format_double(r.club) << ','
            << format_double(r.loss_w) << ',' << format_double(r.val_mse) << ',' << format_double(r.cls_accuracy)
            << '\n';
}

}  // namespace cfseq
