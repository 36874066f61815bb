#include "cfseq/encoder/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "cfseq/diffcore/optim.hpp"
#include "cfseq/evalkit/early_stop.hpp"

namespace cfseq {

const char* bound_name(MiBound b) {
    switch (b) {
        case MiBound::infonce: return "infonce";
        case MiBound::nwj: return "nwj";
        case MiBound::mine: return "mine";
    }
    return "?";
}

MiBound parse_bound(const std::string& s) {
    if (s == "infonce") return MiBound::infonce;
    if (s == "nwj") return MiBound::nwj;
    if (s == "mine") return MiBound::mine;
    throw std::invalid_argument("unknown MI bound '" + s + "' (expected infonce, nwj or mine)");
}

Encoder Encoder::init(std::size_t d_u, std::size_t z_dim, std::size_t c_dim, std::size_t tau, Rng& rng) {
    if (tau < 1) throw std::invalid_argument("encoder: tau must be at least 1");
    ParamStore s;
    make_weight_norm_affine(s, "enc.local1", "enc.local", d_u, z_dim, rng);
    make_weight_norm_affine(s, "enc.local2", "enc.local", z_dim, z_dim, rng);
    make_gru(s, "enc.context", "enc.context", z_dim, c_dim, rng);
    for (std::size_t j = 0; j < tau; ++j)
        s.add("enc.gamma" + std::to_string(j + 1), "enc.gamma", init_uniform({z_dim, c_dim}, c_dim, rng));
    make_affine(s, "enc.eta1", "enc.infomax", c_dim, c_dim, rng);
    make_affine(s, "enc.eta2", "enc.infomax", c_dim, c_dim, rng);
    return bind(std::move(s), d_u, z_dim, c_dim, tau);
}

Encoder Encoder::bind(ParamStore store, std::size_t d_u, std::size_t z_dim, std::size_t c_dim, std::size_t tau) {
    Encoder e;
    e.store = std::move(store);
    e.d_u = d_u;
    e.z_dim = z_dim;
    e.c_dim = c_dim;
    e.tau = tau;
    e.local1 = bind_weight_norm_affine(e.store, "enc.local1");
    e.local2 = bind_weight_norm_affine(e.store, "enc.local2");
    e.context = bind_gru(e.store, "enc.context");
    for (std::size_t j = 0; j < tau; ++j) e.gamma.push_back(e.store.get("enc.gamma" + std::to_string(j + 1)));
    e.eta1 = bind_affine(e.store, "enc.eta1");
    e.eta2 = bind_affine(e.store, "enc.eta2");
    if (e.local1.direction.shape() != Shape{z_dim, d_u}) {
        throw ShapeError("encoder: enc.local1 is " + to_string(e.local1.direction.shape()) + ", expected " +
                         to_string(Shape{z_dim, d_u}));
    }
    return e;
}

Encoder Encoder::clone() const { return bind(store.clone(), d_u, z_dim, c_dim, tau); }

std::vector<Value> Encoder::representation_params() const { return store.groups({"enc.local", "enc.context"}); }

Value encode_local(const Encoder& enc, const Value& u) {
    if (u.shape().size() != 2 || u.shape()[1] != enc.d_u) {
        throw ShapeError("encode_local: expected [m x " + std::to_string(enc.d_u) + "], got " + to_string(u.shape()));
    }
    return enc.local2(selu(enc.local1(u)));
}

Value gru_step(const GruCell& cell, const Value& x, const Value& h) { return cell.step(x, h); }

std::vector<Value> encode_context(const Encoder& enc, const std::vector<Value>& z,
                                  const std::vector<std::vector<double>>& mask, const Value& h0) {
    if (z.empty()) throw std::invalid_argument("encode_context: empty sequence");
    if (mask.size() < z.size()) throw std::invalid_argument("encode_context: mask shorter than sequence");
    const std::size_t n = z.front().shape()[0];
    Value h = h0.valid() ? h0 : constant(Tensor(Shape{n, enc.c_dim}, 0.0));
    std::vector<Value> out;
    out.reserve(z.size());
    for (std::size_t t = 0; t < z.size(); ++t) {
        Value next = gru_step(enc.context, z[t], h);
        const auto& m = mask[t];
        const bool all_on = std::all_of(m.begin(), m.end(), [](double v) { return v == 1.0; });
        if (all_on) {
            h = next;
        } else {
            Tensor mt(Shape{n, 1}, 0.0);
            for (std::size_t i = 0; i < n; ++i) mt.data[i] = m[i];
            h = h + constant(std::move(mt)) * (next - h);
        }
        out.push_back(h);
    }
    return out;
}

std::vector<Value> local_features(const Encoder& enc, const SequenceBatch& batch, std::size_t len) {
    if (len > batch.len) throw std::invalid_argument("local_features: len exceeds batch length");
    const std::size_t n = batch.n, d = enc.d_u;
    Tensor u(Shape{len * n, d}, std::vector<double>(batch.u.data.begin(),
                                                    batch.u.data.begin() + static_cast<std::ptrdiff_t>(len * n * d)));
    Value z = encode_local(enc, constant(std::move(u)));
    std::vector<Value> out;
    out.reserve(len);
    for (std::size_t t = 0; t < len; ++t) out.push_back(slice(z, 0, t * n, (t + 1) * n));
    return out;
}

namespace {

std::vector<std::size_t> diagonal(std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
}

void require_square(const Value& s, const char* who) {
    if (s.shape().size() != 2 || s.shape()[0] != s.shape()[1]) {
        throw ShapeError(std::string(who) + ": scores must be square, got " + to_string(s.shape()));
    }
    if (s.shape()[0] < 2) throw std::invalid_argument(std::string(who) + ": need at least 2 units for negatives");
}

}  // namespace

Value infonce_from_scores(const Value& scores) {
    require_square(scores, "infonce");
    const std::size_t n = scores.shape()[0];
    return -mean(one_hot_gather(log_softmax(scores), diagonal(n)));
}

Value mi_lower_bound_alt(const Value& scores, MiBound kind) {
    require_square(scores, "mi_lower_bound_alt");
    const std::size_t n = scores.shape()[0];
    Value pos = mean(one_hot_gather(scores, diagonal(n)));
    // Diagonal entries pushed to -1e300 vanish under exp.
    Tensor off(Shape{n, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i) off.at(i, i) = -1e300;
    const double log_count = std::log(static_cast<double>(n * (n - 1)));
    switch (kind) {
        case MiBound::nwj:
            return pos - exp(log_sum_exp(scores - 1.0 + constant(off)) - log_count);
        case MiBound::mine:
            return pos - (log_sum_exp(scores + constant(off)) - log_count);
        case MiBound::infonce:
            break;
    }
    throw std::invalid_argument("mi_lower_bound_alt: kind must be NWJ or MINE");
}

Value cpc_scores(const Value& context, const Value& z_future, const Value& gamma_j) {
    return matmul(matmul(context, gamma_j, true), z_future, true);
}

namespace {

void check_view(const Encoder& enc, const BatchView& v) {
    if (!v.batch) throw std::invalid_argument("encoder loss: batch view has no batch");
    if (v.batch->n < 2) throw std::invalid_argument("encoder loss: batch needs at least 2 units");
    if (v.t + enc.tau >= v.batch->len) {
        throw std::invalid_argument("encoder loss: anchor t + tau exceeds the batch length");
    }
    for (std::size_t s = 0; s <= v.t + enc.tau; ++s)
        for (double m : v.batch->mask[s])
            if (m != 1.0) throw std::invalid_argument("encoder loss: unit inactive before t + tau");
}

Value cpc_from(const Encoder& enc, const std::vector<Value>& z, const std::vector<Value>& c, std::size_t t) {
    Value total;
    for (std::size_t j = 1; j <= enc.tau; ++j) {
        Value l = infonce_from_scores(cpc_scores(c[t], z[t + j], enc.gamma[j - 1]));
        total = total.valid() ? total + l : l;
    }
    return total * (1.0 / static_cast<double>(enc.tau));
}

Value infomax_from(const Encoder& enc, const BatchView& v, const std::vector<Value>& z, const std::vector<Value>& c,
                   MiBound bound) {
    if (v.t0 < 1 || v.t0 >= v.t) throw std::invalid_argument("infomax_loss: split t0 must satisfy 1 <= t0 < t");
    // History view: steps [0, t0); future view: [t0, t] from a fresh state.
    std::vector<Value> zf(z.begin() + static_cast<std::ptrdiff_t>(v.t0), z.begin() + static_cast<std::ptrdiff_t>(v.t + 1));
    std::vector<std::vector<double>> mf(v.batch->mask.begin() + static_cast<std::ptrdiff_t>(v.t0),
                                        v.batch->mask.begin() + static_cast<std::ptrdiff_t>(v.t + 1));
    Value c_future = encode_context(enc, zf, mf).back();
    Value c_hist = c[v.t0 - 1];
    Value predicted = enc.eta2(selu(enc.eta1(c_hist)));
    Value scores = matmul(predicted, c_future, true);
    if (bound == MiBound::infonce) return infonce_from_scores(scores);
    return -mi_lower_bound_alt(scores, bound);
}

}  // namespace

Value infonce_cpc_loss(const Encoder& enc, const BatchView& view) {
    check_view(enc, view);
    const std::size_t len = view.t + enc.tau + 1;
    auto z = local_features(enc, *view.batch, len);
    auto c = encode_context(enc, std::vector<Value>(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(view.t + 1)),
                            view.batch->mask);
    return cpc_from(enc, z, c, view.t);
}

Value infomax_loss(const Encoder& enc, const BatchView& view, MiBound bound) {
    if (!view.batch || view.batch->n < 2) throw std::invalid_argument("infomax_loss: batch needs at least 2 units");
    if (view.t0 < 1 || view.t0 >= view.t || view.t >= view.batch->len) {
        throw std::invalid_argument("infomax_loss: split t0 must satisfy 1 <= t0 < t < len");
    }
    auto z = local_features(enc, *view.batch, view.t + 1);
    auto c = encode_context(enc, std::vector<Value>(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(view.t0)),
                            view.batch->mask);
    return infomax_from(enc, view, z, c, bound);
}

EncoderLosses encoder_losses(const Encoder& enc, const BatchView& view, const EncoderConfig& cfg) {
    check_view(enc, view);
    const std::size_t len = view.t + enc.tau + 1;
    auto z = local_features(enc, *view.batch, len);
    auto c = encode_context(enc, std::vector<Value>(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(view.t + 1)),
                            view.batch->mask);
    EncoderLosses out;
    out.cpc = cpc_from(enc, z, c, view.t);
    out.infomax = infomax_from(enc, view, z, c, cfg.infomax_bound);
    if (cfg.use_cpc && cfg.use_infomax)
        out.total = out.cpc + out.infomax;
    else if (cfg.use_cpc)
        out.total = out.cpc;
    else if (cfg.use_infomax)
        out.total = out.infomax;
    else
        out.total = out.cpc * 0.0;
    return out;
}

namespace {

struct Anchor {
    std::size_t t = 0, t0 = 0;
    std::vector<std::size_t> units;
};

// Draws t (and t0) and keeps the units active through t + tau. Retries a
// bounded number of times when fewer than two units qualify.
bool draw_anchor(const Cohort& c, const std::vector<std::size_t>& pool, std::size_t tau, Rng& rng, Anchor& a) {
    const std::size_t max_len = c.meta.max_len;
    if (max_len < tau + 3) return false;
    for (int attempt = 0; attempt < 20; ++attempt) {
        a.t = static_cast<std::size_t>(uniform_int(rng, 2, static_cast<std::int64_t>(max_len - tau - 1)));
        a.t0 = static_cast<std::size_t>(uniform_int(rng, 1, static_cast<std::int64_t>(a.t - 1)));
        a.units.clear();
        for (std::size_t i : pool)
            if (c.units[i].active_len >= a.t + tau + 1) a.units.push_back(i);
        if (a.units.size() >= 2) return true;
    }
    return false;
}

double evaluate_validation(const Encoder& enc, const Cohort& val, const Normalizer& norm, const EncoderConfig& cfg,
                           std::uint64_t seed) {
    NoGradGuard guard;
    Rng rng = substream(seed, "validation");
    std::vector<std::size_t> all(val.units.size());
    std::iota(all.begin(), all.end(), 0);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t b = 0; b < cfg.val_batches; ++b) {
        // Fixed draws per call: each epoch sees the same validation batches.
        std::vector<std::size_t> pool = all;
        for (std::size_t i = pool.size(); i > 1; --i)
            std::swap(pool[i - 1], pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i - 1)))]);
        if (pool.size() > cfg.batch_size) pool.resize(cfg.batch_size);
        Anchor a;
        if (!draw_anchor(val, pool, enc.tau, rng, a)) continue;
        SequenceBatch batch = make_sequence_batch(val, a.units, a.t + enc.tau + 1, norm);
        EncoderLosses l = encoder_losses(enc, BatchView{&batch, a.t, a.t0}, cfg);
        total += l.total.item();
        ++count;
    }
    if (count == 0) throw TrainingAborted("pretrain_encoder: validation cohort has no usable anchors");
    return total / static_cast<double>(count);
}

}  // namespace

PretrainResult pretrain_encoder(const Cohort& train, const Cohort& val, const Normalizer& norm,
                                const EncoderConfig& cfg, std::uint64_t seed) {
    if (train.meta.max_len < cfg.tau + 3) {
        throw std::invalid_argument("pretrain_encoder: sequences must be at least tau + 3 long");
    }
    Rng init = substream(seed, "init");
    PretrainResult res{Encoder::init(norm.component_dim(), cfg.z_dim, cfg.c_dim, cfg.tau, init), {}, 0, 0};
    if (cfg.max_epochs == 0) return res;

    Encoder& enc = res.encoder;
    std::vector<Value> params = enc.store.all();
    OptimizerState state;
    AdamWConfig opt{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay};
    EarlyStopMonitor monitor(cfg.min_delta, cfg.patience);
    std::vector<Tensor> best = enc.store.snapshot();
    Rng batching = substream(seed, "batching");
    std::vector<std::size_t> order(train.units.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1],
                      order[static_cast<std::size_t>(uniform_int(batching, 0, static_cast<std::int64_t>(i - 1)))]);
        double sum_cpc = 0.0, sum_im = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<std::size_t> pool(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(
                                                              std::min(order.size(), start + cfg.batch_size)));
            Anchor a;
            if (!draw_anchor(train, pool, cfg.tau, batching, a)) continue;
            SequenceBatch batch = make_sequence_batch(train, a.units, a.t + cfg.tau + 1, norm);
            EncoderLosses l = encoder_losses(enc, BatchView{&batch, a.t, a.t0}, cfg);
            const double total = l.total.item();
            if (!std::isfinite(total)) {
                throw TrainingAborted("pretrain_encoder: non-finite loss at epoch " + std::to_string(epoch) +
                                      ", anchor t=" + std::to_string(a.t) + ", t0=" + std::to_string(a.t0) +
                                      " (cpc " + std::to_string(l.cpc.item()) + ", infomax " +
                                      std::to_string(l.infomax.item()) + ")");
            }
            std::vector<Tensor> grads = collect_grads(backward(l.total), params);
            if (cfg.clip_norm > 0.0) clip_grad_norm(grads, cfg.clip_norm);
            if (!adamw_step(params, grads, state, opt)) {
                throw TrainingAborted("pretrain_encoder: non-finite gradient at epoch " + std::to_string(epoch));
            }
            ++step;
            sum_cpc += l.cpc.item();
            sum_im += l.infomax.item();
            ++batches;
        }
        const double v = evaluate_validation(enc, val, norm, cfg, seed);
        const double denom = batches ? static_cast<double>(batches) : 1.0;
        res.log.push_back({step, sum_cpc / denom, sum_im / denom, v});
        const bool stop = monitor.update(v);
        if (monitor.improved_last()) {
            best = enc.store.snapshot();
            res.best_epoch = epoch;
        }
        res.epochs_run = epoch + 1;
        if (stop) break;
    }
    enc.store.restore(best);
    return res;
}

void write_pretrain_log(const std::vector<PretrainLogRow>& log, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "step,loss_cpc,loss_infomax,val_loss\n";
    for (const auto& r : log)
        out << r.step << ',' << format_double(r.loss_cpc) << ',' << format_double(r.loss_infomax) << ','
            << format_double(r.val_loss) << '\n';
}

}  // namespace cfseq
