#include "cfseq/simkit/ehr.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace cfseq {

double matern32(double distance, double lengthscale, double variance) {
    const double a = std::sqrt(3.0) * std::abs(distance) / lengthscale;
    return variance * (1.0 + a) * std::exp(-a);
}

std::vector<double> matern_cholesky(const std::vector<double>& times, double lengthscale, double variance) {
    if (!(lengthscale > 0.0) || !(variance > 0.0)) {
        throw std::invalid_argument("sample_gp_matern: lengthscale and variance must be positive");
    }
    for (std::size_t i = 1; i < times.size(); ++i)
        if (!(times[i] > times[i - 1])) throw std::invalid_argument("sample_gp_matern: times must be strictly increasing");
    const auto n = static_cast<Eigen::Index>(times.size());
    Eigen::MatrixXd k(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) k(i, j) = matern32(times[i] - times[j], lengthscale, variance);
    double jitter = 1e-8;
    for (int attempt = 0; attempt < 6; ++attempt, jitter *= 10.0) {
        Eigen::MatrixXd kj = k;
        kj.diagonal().array() += jitter;
        Eigen::LLT<Eigen::MatrixXd> llt(kj);
        if (llt.info() != Eigen::Success) continue;
        Eigen::MatrixXd l = llt.matrixL();
        std::vector<double> out(static_cast<std::size_t>(n * n));
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < n; ++j) out[static_cast<std::size_t>(i * n + j)] = l(i, j);
        return out;
    }
    throw std::runtime_error("sample_gp_matern: covariance factorization failed after jitter escalation");
}

std::vector<double> sample_gp_with_factor(const std::vector<double>& factor, std::size_t n, Rng& rng) {
    std::vector<double> z(n), out(n, 0.0);
    for (double& v : z) v = standard_normal(rng);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) out[i] += factor[i * n + j] * z[j];
    return out;
}

std::vector<double> sample_gp_matern(const std::vector<double>& times, double lengthscale, double variance, Rng& rng) {
    return sample_gp_with_factor(matern_cholesky(times, lengthscale, variance), times.size(), rng);
}

std::vector<double> RffFunction::features(const std::vector<double>& x) const {
    if (x.size() != d_in) throw std::invalid_argument("rff_function: input dimension mismatch");
    const double s = std::sqrt(2.0 / static_cast<double>(omega.size()));
    std::vector<double> phi(omega.size());
    for (std::size_t k = 0; k < omega.size(); ++k) {
        double a = phase[k];
        for (std::size_t i = 0; i < d_in; ++i) a += omega[k][i] * x[i];
        phi[k] = s * std::cos(a);
    }
    return phi;
}

double RffFunction::operator()(const std::vector<double>& x) const {
    std::vector<double> phi = features(x);
    double out = 0.0;
    for (std::size_t k = 0; k < phi.size(); ++k) out += weight[k] * phi[k];
    return out;
}

RffFunction rff_function(std::size_t d_in, std::size_t feature_count, double lengthscale, Rng& rng) {
    if (feature_count == 0) throw std::invalid_argument("rff_function: feature_count must be at least 1");
    RffFunction f;
    f.d_in = d_in;
    f.omega.assign(feature_count, std::vector<double>(d_in));
    f.phase.resize(feature_count);
    f.weight.resize(feature_count);
    for (std::size_t k = 0; k < feature_count; ++k) {
        for (double& o : f.omega[k]) o = standard_normal(rng) / lengthscale;
        f.phase[k] = 2.0 * std::numbers::pi * uniform01(rng);
    }
    for (double& w : f.weight) w = standard_normal(rng);
    return f;
}

std::vector<double> bspline_basis(double t, const std::vector<double>& knots, int degree) {
    if (degree < 0) throw std::invalid_argument("bspline_basis: degree must be nonnegative");
    if (knots.size() < static_cast<std::size_t>(degree) + 2)
        throw std::invalid_argument("bspline_basis: not enough knots for the degree");
    for (std::size_t i = 1; i < knots.size(); ++i)
        if (knots[i] < knots[i - 1]) throw std::invalid_argument("bspline_basis: knots must be nondecreasing");
    const std::size_t m = knots.size();
    const double lo = knots[degree], hi = knots[m - 1 - degree];
    if (t < lo || t > hi) throw std::out_of_range("bspline_basis: t outside the knot span");

    // degree 0 indicators; the last nonempty span is closed on the right.
    std::size_t last = 0;
    for (std::size_t i = 0; i + 1 < m; ++i)
        if (knots[i] < knots[i + 1] && knots[i + 1] <= hi) last = i;
    std::vector<double> b(m - 1, 0.0);
    for (std::size_t i = 0; i + 1 < m; ++i) {
        if (knots[i] < knots[i + 1] && ((t >= knots[i] && t < knots[i + 1]) || (i == last && t == knots[i + 1])))
            b[i] = 1.0;
    }
    for (int p = 1; p <= degree; ++p) {
        std::vector<double> nb(m - 1 - p, 0.0);
        for (std::size_t i = 0; i < nb.size(); ++i) {
            double left = 0.0, right = 0.0;
            const double d1 = knots[i + p] - knots[i];
            const double d2 = knots[i + p + 1] - knots[i + 1];
            if (d1 > 0.0) left = (t - knots[i]) / d1 * b[i];
            if (d2 > 0.0) right = (knots[i + p + 1] - t) / d2 * b[i + 1];
            nb[i] = left + right;
        }
        b = std::move(nb);
    }
    return b;
}

double apply_treatment_effect(const std::vector<std::vector<int>>& treated,
                              const std::vector<std::vector<double>>& prob, const std::vector<double>& beta,
                              const std::vector<std::size_t>& windows, std::size_t t) {
    if (windows.size() != beta.size()) throw std::invalid_argument("apply_treatment_effect: one window per treatment");
    std::size_t w = 0;
    for (std::size_t wl : windows) {
        if (wl < 1) throw std::invalid_argument("apply_treatment_effect: window must be at least 1");
        w = std::max(w, wl);
    }
    const std::size_t start = t >= w ? t - w : 0;
    double e = 0.0;
    for (std::size_t i = start; i <= t; ++i) {
        double m = 0.0;
        bool first = true;
        for (std::size_t l = 0; l < beta.size(); ++l) {
            const bool in_window = t - i <= windows[l];
            const double term = (in_window && treated[i][l] == 1) ? prob[i][l] * beta[l] : 0.0;
            m = first ? term : std::min(m, term);
            first = false;
        }
        const double d = static_cast<double>(t - i + 1);
        e += m / (d * d);
    }
    return e;
}

void EHRGenConfig::validate() const {
    auto check = [](bool ok, const std::string& what) {
        if (!ok) throw std::invalid_argument("ehr config: " + what);
    };
    check(d_x >= 1 && d_y >= 1 && d_a >= 1, "dimensions must be positive");
    check(d_a <= 4, "at most 4 binary treatments");
    check(alpha_s.size() == d_y && alpha_g.size() == d_y && alpha_f.size() == d_y, "mixing weights need d_y entries");
    check(gamma_a.size() == d_a && gamma_x.size() == d_a && bias.size() == d_a, "assignment terms need d_a entries");
    check(beta.size() == d_a * d_y, "beta needs d_a * d_y entries");
    check(effect_window.size() == d_a && outcome_window.size() == d_a, "windows need d_a entries");
    for (auto w : effect_window) check(w >= 1, "effect windows must be at least 1");
    for (auto w : outcome_window) check(w >= 1, "outcome windows must be at least 1");
    check(rff_features >= 1, "rff_features must be at least 1");
    check(!assign_covariates.empty(), "assign_covariates must not be empty");
    for (auto c : assign_covariates) check(c < d_x, "assign_covariates index out of range");
    check(cov_lengthscale > 0 && cov_variance > 0 && g_lengthscale > 0 && g_variance > 0 && rff_lengthscale > 0,
          "lengthscales and variances must be positive");
}

namespace {

template <class T>
std::string join(const std::vector<T>& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) s += ",";
        if constexpr (std::is_floating_point_v<T>)
            s += format_double(xs[i]);
        else
            s += std::to_string(xs[i]);
    }
    return s;
}

template <class T>
std::vector<T> split(const std::string& s) {
    std::vector<T> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if constexpr (std::is_floating_point_v<T>)
            out.push_back(std::stod(tok));
        else
            out.push_back(static_cast<T>(std::stoull(tok)));
    }
    return out;
}

const std::string& need(const KeyValues& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw CohortFormatError("ehr config: missing " + key);
    return it->second;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct EhrRoll {
    std::vector<std::vector<double>> y;  // [T][d_y]
    std::vector<int> codes;
    std::size_t overlap_violations = 0;
};

EhrRoll roll(const EHRGenConfig& cfg, const SimState& st, std::size_t steps, const std::vector<int>* forced) {
    std::vector<std::size_t> cz(cfg.d_y), cf(cfg.d_a), cu(cfg.d_a);
    for (std::size_t j = 0; j < cfg.d_y; ++j) cz[j] = st.column("z_" + std::to_string(j));
    for (std::size_t l = 0; l < cfg.d_a; ++l) {
        cf[l] = st.column("fy_" + std::to_string(l));
        cu[l] = st.column("u_" + std::to_string(l));
    }
    EhrRoll r;
    r.y.assign(steps, std::vector<double>(cfg.d_y, 0.0));
    r.codes.assign(steps, 0);
    std::vector<std::vector<int>> treated(steps, std::vector<int>(cfg.d_a, 0));
    std::vector<std::vector<double>> prob(steps, std::vector<double>(cfg.d_a, 0.0));
    const int k = 1 << cfg.d_a;
    for (std::size_t t = 0; t < steps; ++t) {
        const auto& row = st.steps[t];
        int code = 0;
        for (std::size_t l = 0; l < cfg.d_a; ++l) {
            const std::size_t tl = cfg.outcome_window[l];
            const std::size_t lo = t > tl ? t - tl : 0;
            double abar = 0.0;
            for (std::size_t s = lo; s < t; ++s) abar += r.y[s][0];
            if (t > lo) abar /= static_cast<double>(t - lo);
            const double p = sigmoid(cfg.gamma_a[l] * abar + cfg.gamma_x[l] * row[cf[l]] + cfg.bias[l]);
            prob[t][l] = p;
            bool a;
            if (forced) {
                const int c = (*forced)[t];
                if (c < 0 || c >= k) throw std::invalid_argument("ehr rollout: treatment code out of range");
                a = (c >> l) & 1;
            } else {
                if (!(p > 0.01 && p < 0.99)) ++r.overlap_violations;
                a = row[cu[l]] < p;
            }
            treated[t][l] = a ? 1 : 0;
            code |= (a ? 1 : 0) << l;
        }
        r.codes[t] = code;
        for (std::size_t j = 0; j < cfg.d_y; ++j) {
            std::vector<double> beta_j(cfg.d_a);
            for (std::size_t l = 0; l < cfg.d_a; ++l) beta_j[l] = cfg.beta[l * cfg.d_y + j];
            r.y[t][j] = row[cz[j]] + apply_treatment_effect(treated, prob, beta_j, cfg.effect_window, t);
        }
    }
    return r;
}

}  // namespace

KeyValues EHRGenConfig::to_kv() const {
    KeyValues kv;
    kv["d_x"] = std::to_string(d_x);
    kv["d_y"] = std::to_string(d_y);
    kv["d_a"] = std::to_string(d_a);
    kv["d_v"] = std::to_string(d_v);
    kv["alpha_s"] = join(alpha_s);
    kv["alpha_g"] = join(alpha_g);
    kv["alpha_f"] = join(alpha_f);
    kv["noise_sd"] = format_double(noise_sd);
    kv["cov_lengthscale"] = format_double(cov_lengthscale);
    kv["cov_variance"] = format_double(cov_variance);
    kv["g_lengthscale"] = format_double(g_lengthscale);
    kv["g_variance"] = format_double(g_variance);
    kv["rff_features"] = std::to_string(rff_features);
    kv["rff_lengthscale"] = format_double(rff_lengthscale);
    kv["spline_knots"] = std::to_string(spline_knots);
    kv["gamma_a"] = join(gamma_a);
    kv["gamma_x"] = join(gamma_x);
    kv["bias"] = join(bias);
    kv["beta"] = join(beta);
    kv["effect_window"] = join(effect_window);
    kv["outcome_window"] = join(outcome_window);
    kv["assign_covariates"] = join(assign_covariates);
    kv["tau"] = std::to_string(tau);
    return kv;
}

EHRGenConfig EHRGenConfig::from_kv(const KeyValues& kv) {
    EHRGenConfig c;
    c.d_x = std::stoul(need(kv, "d_x"));
    c.d_y = std::stoul(need(kv, "d_y"));
    c.d_a = std::stoul(need(kv, "d_a"));
    c.d_v = std::stoul(need(kv, "d_v"));
    c.alpha_s = split<double>(need(kv, "alpha_s"));
    c.alpha_g = split<double>(need(kv, "alpha_g"));
    c.alpha_f = split<double>(need(kv, "alpha_f"));
    c.noise_sd = std::stod(need(kv, "noise_sd"));
    c.cov_lengthscale = std::stod(need(kv, "cov_lengthscale"));
    c.cov_variance = std::stod(need(kv, "cov_variance"));
    c.g_lengthscale = std::stod(need(kv, "g_lengthscale"));
    c.g_variance = std::stod(need(kv, "g_variance"));
    c.rff_features = std::stoul(need(kv, "rff_features"));
    c.rff_lengthscale = std::stod(need(kv, "rff_lengthscale"));
    c.spline_knots = std::stoul(need(kv, "spline_knots"));
    c.gamma_a = split<double>(need(kv, "gamma_a"));
    c.gamma_x = split<double>(need(kv, "gamma_x"));
    c.bias = split<double>(need(kv, "bias"));
    c.beta = split<double>(need(kv, "beta"));
    c.effect_window = split<std::size_t>(need(kv, "effect_window"));
    c.outcome_window = split<std::size_t>(need(kv, "outcome_window"));
    c.assign_covariates = split<std::size_t>(need(kv, "assign_covariates"));
    c.tau = std::stoul(need(kv, "tau"));
    c.validate();
    return c;
}

EHRWorld make_ehr_world(const EHRGenConfig& cfg, std::size_t max_len, std::uint64_t seed) {
    Rng rng = substream(seed, "world");
    EHRWorld w;
    const double end = static_cast<double>(std::max<std::size_t>(max_len, 2) - 1);
    const int degree = 3;
    for (int i = 0; i <= degree; ++i) w.knots.push_back(0.0);
    for (std::size_t i = 1; i <= cfg.spline_knots; ++i)
        w.knots.push_back(end * static_cast<double>(i) / static_cast<double>(cfg.spline_knots + 1));
    for (int i = 0; i <= degree; ++i) w.knots.push_back(end);
    const std::size_t n_basis = w.knots.size() - degree - 1;
    w.spline_coef.assign(cfg.d_y, std::vector<double>(n_basis));
    for (auto& row : w.spline_coef)
        for (double& c : row) c = standard_normal(rng);
    for (std::size_t j = 0; j < cfg.d_y; ++j) w.f_z.push_back(rff_function(cfg.d_x, cfg.rff_features, cfg.rff_lengthscale, rng));
    for (std::size_t l = 0; l < cfg.d_a; ++l)
        w.f_y.push_back(rff_function(cfg.assign_covariates.size(), cfg.rff_features, cfg.rff_lengthscale, rng));
    return w;
}

Cohort simulate_ehr_cohort(const EHRGenConfig& cfg, std::size_t n, std::size_t max_len, std::uint64_t seed,
                           std::int64_t first_unit_id) {
    cfg.validate();
    if (n == 0) throw std::invalid_argument("simulate_ehr_cohort: n must be at least 1");
    if (max_len < cfg.tau + 1) throw std::invalid_argument("simulate_ehr_cohort: max_len must be at least tau + 1");
    const EHRWorld world = make_ehr_world(cfg, max_len, seed);
    std::vector<double> times(max_len);
    for (std::size_t t = 0; t < max_len; ++t) times[t] = static_cast<double>(t);
    const std::vector<double> cov_factor = matern_cholesky(times, cfg.cov_lengthscale, cfg.cov_variance);
    const std::vector<double> g_factor = matern_cholesky(times, cfg.g_lengthscale, cfg.g_variance);
    std::vector<std::vector<double>> spline(max_len);
    for (std::size_t t = 0; t < max_len; ++t) {
        std::vector<double> b = bspline_basis(times[t], world.knots, 3);
        spline[t].assign(cfg.d_y, 0.0);
        for (std::size_t j = 0; j < cfg.d_y; ++j)
            for (std::size_t i = 0; i < b.size(); ++i) spline[t][j] += world.spline_coef[j][i] * b[i];
    }

    Cohort c;
    c.meta.generator = "ehr";
    c.meta.config = cfg.to_kv();
    c.meta.seed = seed;
    c.meta.d_x = cfg.d_x;
    c.meta.d_v = cfg.d_v;
    c.meta.n_treatments = std::size_t{1} << cfg.d_a;
    c.meta.max_len = max_len;

    double y_lo = INFINITY, y_hi = -INFINITY;
    for (std::size_t i = 0; i < n; ++i) {
        const std::int64_t id = first_unit_id + static_cast<std::int64_t>(i);
        Rng rng = substream(seed, "sim", static_cast<std::uint64_t>(id));
        Trajectory u;
        u.unit_id = id;
        const std::size_t lo = std::min(cfg.tau + 5, max_len);
        u.active_len = static_cast<std::size_t>(
            uniform_int(rng, static_cast<std::int64_t>(lo), static_cast<std::int64_t>(max_len)));
        u.v.resize(cfg.d_v);
        for (double& v : u.v) v = standard_normal(rng);
        u.x.assign(max_len, std::vector<double>(cfg.d_x));
        for (std::size_t d = 0; d < cfg.d_x; ++d) {
            std::vector<double> path = sample_gp_with_factor(cov_factor, max_len, rng);
            for (std::size_t t = 0; t < max_len; ++t) u.x[t][d] = path[t];
        }
        std::vector<std::vector<double>> g(cfg.d_y);
        for (auto& path : g) path = sample_gp_with_factor(g_factor, max_len, rng);

        SimState st;
        for (std::size_t j = 0; j < cfg.d_y; ++j) st.step_columns.push_back("z_" + std::to_string(j));
        for (std::size_t l = 0; l < cfg.d_a; ++l) st.step_columns.push_back("fy_" + std::to_string(l));
        for (std::size_t l = 0; l < cfg.d_a; ++l) st.step_columns.push_back("u_" + std::to_string(l));
        st.steps.resize(max_len);
        std::vector<double> sub(cfg.assign_covariates.size());
        for (std::size_t t = 0; t < max_len; ++t) {
            auto& row = st.steps[t];
            for (std::size_t j = 0; j < cfg.d_y; ++j) {
                row.push_back(cfg.alpha_s[j] * spline[t][j] + cfg.alpha_g[j] * g[j][t] +
                              cfg.alpha_f[j] * world.f_z[j](u.x[t]) + cfg.noise_sd * standard_normal(rng));
            }
            for (std::size_t k = 0; k < sub.size(); ++k) sub[k] = u.x[t][cfg.assign_covariates[k]];
            for (std::size_t l = 0; l < cfg.d_a; ++l) row.push_back(world.f_y[l](sub));
            for (std::size_t l = 0; l < cfg.d_a; ++l) row.push_back(uniform01(rng));
        }
        EhrRoll r = roll(cfg, st, max_len, nullptr);
        c.meta.overlap_violations += r.overlap_violations;
        u.w = r.codes;
        u.y.resize(max_len);
        for (std::size_t t = 0; t < max_len; ++t) {
            u.y[t] = r.y[t][0];
            y_lo = std::min(y_lo, u.y[t]);
            y_hi = std::max(y_hi, u.y[t]);
        }
        u.sim_state = std::move(st);
        c.units.push_back(std::move(u));
    }
    c.meta.y_offset = y_lo;
    c.meta.y_scale = y_hi > y_lo ? y_hi - y_lo : 1.0;
    return c;
}

std::vector<double> ehr_rollout(const EHRGenConfig& cfg, const SimState& state, const std::vector<int>& codes) {
    EhrRoll r = roll(cfg, state, codes.size(), &codes);
    std::vector<double> out(codes.size());
    for (std::size_t t = 0; t < codes.size(); ++t) out[t] = r.y[t][0];
    return out;
}

}  // namespace cfseq
