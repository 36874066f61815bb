#include "cfseq/simkit/tumor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace cfseq {

double sphere_volume(double diameter) { return std::numbers::pi / 6.0 * diameter * diameter * diameter; }

double sphere_diameter(double volume) { return std::cbrt(6.0 * volume / std::numbers::pi); }

namespace {

double positive_normal(double mean, double sd, int retries, Rng& rng, const char* what) {
    if (sd == 0.0) {
        if (mean > 0.0) return mean;
        throw ResampleError(std::string("prior for ") + what + " has no positive mass");
    }
    for (int i = 0; i < retries; ++i) {
        double x = mean + sd * standard_normal(rng);
        if (x > 0.0) return x;
    }
    throw ResampleError(std::string("prior for ") + what + " kept yielding nonpositive draws");
}

double truncated_normal(double mu, double sigma, double lo, double hi, int retries, Rng& rng) {
    for (int i = 0; i < retries; ++i) {
        double x = mu + sigma * standard_normal(rng);
        if (x >= lo && x <= hi) return x;
    }
    throw ResampleError("initial diameter draw exhausted its retries");
}

}  // namespace

PatientDraw sample_pkpd_patient(const PKPDPrior& prior, Rng& rng) {
    PatientDraw d;
    d.patient_type = static_cast<int>(uniform_int(rng, 1, 3));
    const double radio_adj = d.patient_type == 1 ? 1.0 + prior.type_adjust : 1.0;
    const double chemo_adj = d.patient_type == 3 ? 1.0 + prior.type_adjust : 1.0;

    PKPDParams& p = d.params;
    p.growth = positive_normal(prior.growth_mean, prior.growth_sd, prior.max_retries, rng, "growth");
    p.radio_linear =
        positive_normal(prior.radio_mean * radio_adj, prior.radio_sd, prior.max_retries, rng, "radiation");
    p.radio_quad = p.radio_linear / prior.alpha_beta_ratio;
    p.chemo = positive_normal(prior.chemo_mean * chemo_adj, prior.chemo_sd, prior.max_retries, rng, "chemo");
    p.capacity = positive_normal(sphere_volume(prior.capacity_diameter), prior.capacity_sd, prior.max_retries, rng,
                                 "capacity");
    p.noise_sd = prior.noise_sd;

    double total = 0.0;
    for (double w : prior.stage_weight) total += w;
    double u = uniform01(rng) * total;
    d.stage = 4;
    for (int s = 0; s < 5; ++s) {
        if (u < prior.stage_weight[s]) {
            d.stage = s;
            break;
        }
        u -= prior.stage_weight[s];
    }
    const double log_d = truncated_normal(prior.stage_mu[d.stage], prior.stage_sigma[d.stage],
                                          std::log(prior.diameter_lower), std::log(prior.stage_upper[d.stage]),
                                          prior.max_retries, rng);
    d.initial_volume = sphere_volume(std::exp(log_d));
    return d;
}

double step_tumor(double v_prev, double chemo_conc, double radiation_dose, double noise, const PKPDParams& p) {
    if (!(v_prev > 0.0)) throw std::invalid_argument("step_tumor: previous volume must be positive");
    const double factor = 1.0 + p.growth * std::log(p.capacity / v_prev) - p.chemo * chemo_conc -
                          (p.radio_linear * radiation_dose + p.radio_quad * radiation_dose * radiation_dose) + noise;
    return std::clamp(factor * v_prev, p.v_min, p.v_max);
}

double tumor_assignment_probability(std::span<const double> diameters, double gamma, double d_max) {
    if (diameters.empty()) throw std::invalid_argument("assign_treatment_tumor: empty diameter window");
    if (gamma < 0.0) throw std::invalid_argument("assign_treatment_tumor: gamma must be nonnegative");
    double mean = 0.0;
    for (double d : diameters) mean += d;
    mean /= static_cast<double>(diameters.size());
    const double pi = gamma / d_max * (mean - d_max / 2.0);
    return 1.0 / (1.0 + std::exp(-pi));
}

TumorAssignment assign_treatment_tumor(std::span<const double> diameters, double gamma, Rng& rng, double d_max) {
    const double p = tumor_assignment_probability(diameters, gamma, d_max);
    TumorAssignment a;
    a.chemo = uniform01(rng) < p;
    a.radio = uniform01(rng) < p;
    return a;
}

namespace {

std::string join(std::span<const double> xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + format_double(xs[i]);
    return s;
}

std::array<double, 5> split5(const std::string& s, const std::string& key) {
    std::array<double, 5> out{};
    std::stringstream ss(s);
    std::string tok;
    std::size_t i = 0;
    while (std::getline(ss, tok, ',')) {
        if (i >= 5) break;
        out[i++] = std::stod(tok);
    }
    if (i != 5) throw CohortFormatError("tumor config: " + key + " needs 5 comma-separated values");
    return out;
}

const std::string& need(const KeyValues& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw CohortFormatError("tumor config: missing " + key);
    return it->second;
}

struct Roll {
    std::vector<double> volumes;
    std::vector<int> codes;
    std::size_t overlap_violations = 0;
};

// Shared by generation (forced == nullptr: draw from recorded uniforms) and
// counterfactual replay (forced codes), so both follow one arithmetic path.
Roll roll(const TumorConfig& cfg, const SimState& st, std::size_t steps, const std::vector<int>* forced) {
    PKPDParams p;
    p.growth = st.param("growth");
    p.capacity = st.param("capacity");
    p.chemo = st.param("chemo");
    p.radio_linear = st.param("radio_linear");
    p.radio_quad = st.param("radio_quad");
    p.noise_sd = st.param("noise_sd");
    p.v_min = cfg.v_min;
    p.v_max = sphere_volume(cfg.v_max_diameter);
    const std::size_t c_noise = st.column("noise");
    const std::size_t c_uc = st.column("u_chemo");
    const std::size_t c_ur = st.column("u_radio");
    const double decay = std::pow(0.5, 1.0 / cfg.drug_half_life);

    Roll r;
    r.volumes.resize(steps);
    r.codes.assign(steps, 0);
    if (steps == 0) return r;
    r.volumes[0] = st.param("initial_volume");
    std::vector<double> diam(steps);
    diam[0] = sphere_diameter(r.volumes[0]);
    double conc = 0.0;
    for (std::size_t t = 1; t < steps; ++t) {
        bool chemo, radio;
        if (forced) {
            int c = (*forced)[t];
            if (c < 0 || c > 3) throw std::invalid_argument("tumor rollout: treatment code out of range");
            chemo = c & 1;
            radio = c & 2;
        } else {
            const std::size_t lo = t > cfg.window ? t - cfg.window : 0;
            const double prob = tumor_assignment_probability(std::span<const double>(diam.data() + lo, t - lo),
                                                             cfg.gamma, cfg.d_max);
            if (!(prob > 0.01 && prob < 0.99)) ++r.overlap_violations;
            chemo = st.steps[t][c_uc] < prob;
            radio = st.steps[t][c_ur] < prob;
        }
        r.codes[t] = (chemo ? 1 : 0) + (radio ? 2 : 0);
        conc = conc * decay + (chemo ? cfg.chemo_dose : 0.0);
        const double rd = radio ? cfg.radio_dose : 0.0;
        r.volumes[t] = step_tumor(r.volumes[t - 1], conc, rd, st.steps[t][c_noise], p);
        diam[t] = sphere_diameter(r.volumes[t]);
    }
    return r;
}

}  // namespace

KeyValues TumorConfig::to_kv() const {
    KeyValues kv;
    kv["gamma"] = format_double(gamma);
    kv["chemo_dose"] = format_double(chemo_dose);
    kv["radio_dose"] = format_double(radio_dose);
    kv["drug_half_life"] = format_double(drug_half_life);
    kv["window"] = std::to_string(window);
    kv["d_max"] = format_double(d_max);
    kv["v_min"] = format_double(v_min);
    kv["v_max_diameter"] = format_double(v_max_diameter);
    kv["tau"] = std::to_string(tau);
    kv["prior.growth_mean"] = format_double(prior.growth_mean);
    kv["prior.growth_sd"] = format_double(prior.growth_sd);
    kv["prior.radio_mean"] = format_double(prior.radio_mean);
    kv["prior.radio_sd"] = format_double(prior.radio_sd);
    kv["prior.chemo_mean"] = format_double(prior.chemo_mean);
    kv["prior.chemo_sd"] = format_double(prior.chemo_sd);
    kv["prior.alpha_beta_ratio"] = format_double(prior.alpha_beta_ratio);
    kv["prior.capacity_diameter"] = format_double(prior.capacity_diameter);
    kv["prior.capacity_sd"] = format_double(prior.capacity_sd);
    kv["prior.type_adjust"] = format_double(prior.type_adjust);
    kv["prior.noise_sd"] = format_double(prior.noise_sd);
    kv["prior.max_retries"] = std::to_string(prior.max_retries);
    kv["prior.stage_weight"] = join(prior.stage_weight);
    kv["prior.stage_mu"] = join(prior.stage_mu);
    kv["prior.stage_sigma"] = join(prior.stage_sigma);
    kv["prior.stage_upper"] = join(prior.stage_upper);
    kv["prior.diameter_lower"] = format_double(prior.diameter_lower);
    return kv;
}

TumorConfig TumorConfig::from_kv(const KeyValues& kv) {
    TumorConfig c;
    auto num = [&](const std::string& k) { return std::stod(need(kv, k)); };
    c.gamma = num("gamma");
    c.chemo_dose = num("chemo_dose");
    c.radio_dose = num("radio_dose");
    c.drug_half_life = num("drug_half_life");
    c.window = std::stoul(need(kv, "window"));
    c.d_max = num("d_max");
    c.v_min = num("v_min");
    c.v_max_diameter = num("v_max_diameter");
    c.tau = std::stoul(need(kv, "tau"));
    c.prior.growth_mean = num("prior.growth_mean");
    c.prior.growth_sd = num("prior.growth_sd");
    c.prior.radio_mean = num("prior.radio_mean");
    c.prior.radio_sd = num("prior.radio_sd");
    c.prior.chemo_mean = num("prior.chemo_mean");
    c.prior.chemo_sd = num("prior.chemo_sd");
    c.prior.alpha_beta_ratio = num("prior.alpha_beta_ratio");
    c.prior.capacity_diameter = num("prior.capacity_diameter");
    c.prior.capacity_sd = num("prior.capacity_sd");
    c.prior.type_adjust = num("prior.type_adjust");
    c.prior.noise_sd = num("prior.noise_sd");
    c.prior.max_retries = std::stoi(need(kv, "prior.max_retries"));
    c.prior.stage_weight = split5(need(kv, "prior.stage_weight"), "prior.stage_weight");
    c.prior.stage_mu = split5(need(kv, "prior.stage_mu"), "prior.stage_mu");
    c.prior.stage_sigma = split5(need(kv, "prior.stage_sigma"), "prior.stage_sigma");
    c.prior.stage_upper = split5(need(kv, "prior.stage_upper"), "prior.stage_upper");
    c.prior.diameter_lower = num("prior.diameter_lower");
    return c;
}

Cohort simulate_tumor_cohort(const TumorConfig& cfg, std::size_t n, std::size_t max_len, std::uint64_t seed,
                             std::int64_t first_unit_id) {
    if (n == 0) throw std::invalid_argument("simulate_tumor_cohort: n must be at least 1");
    if (max_len < cfg.tau + 1) throw std::invalid_argument("simulate_tumor_cohort: max_len must be at least tau + 1");

    Cohort c;
    c.meta.generator = "tumor";
    c.meta.config = cfg.to_kv();
    c.meta.seed = seed;
    c.meta.d_x = 4;
    c.meta.d_v = 4;
    c.meta.n_treatments = 4;
    c.meta.max_len = max_len;
    c.meta.y_offset = 0.0;
    c.meta.y_scale = sphere_volume(cfg.v_max_diameter);

    for (std::size_t i = 0; i < n; ++i) {
        const std::int64_t id = first_unit_id + static_cast<std::int64_t>(i);
        Rng rng = substream(seed, "sim", static_cast<std::uint64_t>(id));
        PatientDraw d = sample_pkpd_patient(cfg.prior, rng);

        Trajectory u;
        u.unit_id = id;
        const std::size_t lo = std::min(cfg.tau + 5, max_len);
        u.active_len = static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(lo),
                                                            static_cast<std::int64_t>(max_len)));
        SimState st;
        st.params = {{"growth", d.params.growth},
                     {"capacity", d.params.capacity},
                     {"chemo", d.params.chemo},
                     {"radio_linear", d.params.radio_linear},
                     {"radio_quad", d.params.radio_quad},
                     {"noise_sd", d.params.noise_sd},
                     {"patient_type", static_cast<double>(d.patient_type)},
                     {"stage", static_cast<double>(d.stage)},
                     {"initial_volume", d.initial_volume}};
        st.step_columns = {"noise", "u_chemo", "u_radio"};
        st.steps.resize(max_len);
        for (auto& row : st.steps) {
            double e = d.params.noise_sd * standard_normal(rng);
            double uc = uniform01(rng);
            double ur = uniform01(rng);
            row = {e, uc, ur};
        }

        Roll r = roll(cfg, st, max_len, nullptr);
        c.meta.overlap_violations += r.overlap_violations;
        u.w = r.codes;
        u.y = r.volumes;
        std::vector<double> onehot(3, 0.0);
        onehot[d.patient_type - 1] = 1.0;
        u.v = {onehot[0], onehot[1], onehot[2], d.stage / 4.0};
        u.x.resize(max_len);
        for (std::size_t t = 0; t < max_len; ++t) u.x[t] = {u.y[t], onehot[0], onehot[1], onehot[2]};
        u.sim_state = std::move(st);
        c.units.push_back(std::move(u));
    }
    return c;
}

std::vector<double> tumor_rollout(const TumorConfig& cfg, const SimState& state, const std::vector<int>& codes) {
    return roll(cfg, state, codes.size(), &codes).volumes;
}

}  // namespace cfseq
