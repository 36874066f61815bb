#include "cfseq/simkit/cohort.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "cfseq/simkit/ehr.hpp"
#include "cfseq/simkit/tumor.hpp"

namespace cfseq {

namespace fs = std::filesystem;

double SimState::param(const std::string& name) const {
    for (const auto& [k, v] : params)
        if (k == name) return v;
    throw CohortFormatError("sim_state: no parameter " + name);
}

std::size_t SimState::column(const std::string& name) const {
    for (std::size_t i = 0; i < step_columns.size(); ++i)
        if (step_columns[i] == name) return i;
    throw CohortFormatError("sim_state: no step column " + name);
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace {

double parse_double(const std::string& s, const fs::path& file, std::size_t line) {
    char* end = nullptr;
    double v = std::strtod(s.c_str(), &end);
    if (s.empty() || end != s.c_str() + s.size()) {
        throw CohortFormatError(file.string() + ":" + std::to_string(line) + ": not a number: '" + s + "'");
    }
    return v;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::ifstream open_in(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw CohortFormatError("cannot open " + p.string());
    return in;
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw CohortFormatError("cannot write " + p.string());
    return out;
}

fs::path with_suffix(const fs::path& dir, const std::string& stem, const char* suffix) {
    return dir / (stem + suffix);
}

}  // namespace

void write_key_values(const KeyValues& kv, const fs::path& path) {
    std::ofstream out = open_out(path);
    for (const auto& [k, v] : kv) out << k << '=' << v << '\n';
}

KeyValues read_key_values(const fs::path& path) {
    std::ifstream in = open_in(path);
    KeyValues kv;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw CohortFormatError(path.string() + ":" + std::to_string(n) + ": expected key=value");
        }
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

std::vector<fs::path> cohort_files(const fs::path& dir, const std::string& stem, bool with_state) {
    std::vector<fs::path> out{with_suffix(dir, stem, ".csv"), with_suffix(dir, stem, ".meta")};
    if (with_state) {
        out.push_back(with_suffix(dir, stem, ".params.csv"));
        out.push_back(with_suffix(dir, stem, ".state.csv"));
    }
    return out;
}

void write_cohort(const Cohort& cohort, const fs::path& dir, const std::string& stem) {
    fs::create_directories(dir);
    const CohortMeta& m = cohort.meta;
    {
        std::ofstream out = open_out(with_suffix(dir, stem, ".csv"));
        out << "unit_id,t,active,w,y";
        for (std::size_t i = 0; i < m.d_x; ++i) out << ",x_" << i;
        for (std::size_t i = 0; i < m.d_v; ++i) out << ",v_" << i;
        out << '\n';
        for (const auto& u : cohort.units) {
            for (std::size_t t = 0; t < u.length(); ++t) {
                out << u.unit_id << ',' << t << ',' << (t < u.active_len ? 1 : 0) << ',' << u.w[t] << ','
                    << format_double(u.y[t]);
                for (double x : u.x[t]) out << ',' << format_double(x);
                for (double v : u.v) out << ',' << format_double(v);
                out << '\n';
            }
        }
    }
    KeyValues kv;
    kv["generator"] = m.generator;
    kv["seed"] = std::to_string(m.seed);
    kv["d_x"] = std::to_string(m.d_x);
    kv["d_v"] = std::to_string(m.d_v);
    kv["K"] = std::to_string(m.n_treatments);
    kv["max_len"] = std::to_string(m.max_len);
    kv["n_units"] = std::to_string(cohort.units.size());
    kv["y_offset"] = format_double(m.y_offset);
    kv["y_scale"] = format_double(m.y_scale);
    kv["overlap_violations"] = std::to_string(m.overlap_violations);
    if (!m.fingerprint.empty()) kv["fingerprint"] = m.fingerprint;
    for (const auto& [k, v] : m.config) kv["config." + k] = v;
    write_key_values(kv, with_suffix(dir, stem, ".meta"));

    const bool with_state = !cohort.units.empty() && cohort.units.front().sim_state.has_value();
    if (!with_state) return;
    const SimState& first = *cohort.units.front().sim_state;
    std::ofstream params = open_out(with_suffix(dir, stem, ".params.csv"));
    params << "unit_id";
    for (const auto& [k, v] : first.params) params << ',' << k;
    params << '\n';
    std::ofstream state = open_out(with_suffix(dir, stem, ".state.csv"));
    state << "unit_id,t";
    for (const auto& c : first.step_columns) state << ',' << c;
    state << '\n';
    for (const auto& u : cohort.units) {
        const SimState& s = *u.sim_state;
        params << u.unit_id;
        for (const auto& [k, v] : s.params) params << ',' << format_double(v);
        params << '\n';
        for (std::size_t t = 0; t < s.steps.size(); ++t) {
            state << u.unit_id << ',' << t;
            for (double v : s.steps[t]) state << ',' << format_double(v);
            state << '\n';
        }
    }
}

Cohort read_cohort(const fs::path& dir, const std::string& stem) {
    Cohort c;
    const fs::path meta_path = with_suffix(dir, stem, ".meta");
    KeyValues kv = read_key_values(meta_path);
    auto need = [&](const std::string& k) -> const std::string& {
        auto it = kv.find(k);
        if (it == kv.end()) throw CohortFormatError(meta_path.string() + ": missing key " + k);
        return it->second;
    };
    c.meta.generator = need("generator");
    c.meta.seed = std::stoull(need("seed"));
    c.meta.d_x = std::stoul(need("d_x"));
    c.meta.d_v = std::stoul(need("d_v"));
    c.meta.n_treatments = std::stoul(need("K"));
    c.meta.max_len = std::stoul(need("max_len"));
    c.meta.y_offset = std::stod(need("y_offset"));
    c.meta.y_scale = std::stod(need("y_scale"));
    c.meta.overlap_violations = std::stoul(need("overlap_violations"));
    if (auto it = kv.find("fingerprint"); it != kv.end()) c.meta.fingerprint = it->second;
    for (const auto& [k, v] : kv)
        if (k.rfind("config.", 0) == 0) c.meta.config[k.substr(7)] = v;

    const fs::path csv = with_suffix(dir, stem, ".csv");
    std::ifstream in = open_in(csv);
    std::string line;
    std::getline(in, line);
    const std::size_t expect = 5 + c.meta.d_x + c.meta.d_v;
    if (split_csv(line).size() != expect) throw CohortFormatError(csv.string() + ": header does not match metadata");
    std::size_t n = 1;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        auto f = split_csv(line);
        if (f.size() != expect) throw CohortFormatError(csv.string() + ":" + std::to_string(n) + ": wrong field count");
        const auto id = static_cast<std::int64_t>(parse_double(f[0], csv, n));
        const auto t = static_cast<std::size_t>(parse_double(f[1], csv, n));
        if (c.units.empty() || c.units.back().unit_id != id) {
            if (t != 0) throw CohortFormatError(csv.string() + ":" + std::to_string(n) + ": unit does not start at t=0");
            c.units.emplace_back();
            c.units.back().unit_id = id;
            c.units.back().v.resize(c.meta.d_v);
            for (std::size_t i = 0; i < c.meta.d_v; ++i) c.units.back().v[i] = parse_double(f[5 + c.meta.d_x + i], csv, n);
        }
        Trajectory& u = c.units.back();
        if (t != u.y.size()) throw CohortFormatError(csv.string() + ":" + std::to_string(n) + ": steps out of order");
        if (f[2] == "1") u.active_len = t + 1;
        u.w.push_back(static_cast<int>(parse_double(f[3], csv, n)));
        u.y.push_back(parse_double(f[4], csv, n));
        std::vector<double> x(c.meta.d_x);
        for (std::size_t i = 0; i < c.meta.d_x; ++i) x[i] = parse_double(f[5 + i], csv, n);
        u.x.push_back(std::move(x));
    }

    const fs::path pp = with_suffix(dir, stem, ".params.csv");
    const fs::path sp = with_suffix(dir, stem, ".state.csv");
    if (!fs::exists(pp) || !fs::exists(sp)) return c;
    std::ifstream pin = open_in(pp);
    std::getline(pin, line);
    auto pnames = split_csv(line);
    std::ifstream sin = open_in(sp);
    std::getline(sin, line);
    auto snames = split_csv(line);
    std::size_t pn = 1, sn = 1;
    for (auto& u : c.units) {
        if (!std::getline(pin, line)) throw CohortFormatError(pp.string() + ": fewer rows than units");
        ++pn;
        auto f = split_csv(line);
        if (f.size() != pnames.size() || static_cast<std::int64_t>(parse_double(f[0], pp, pn)) != u.unit_id) {
            throw CohortFormatError(pp.string() + ":" + std::to_string(pn) + ": row does not match unit");
        }
        SimState s;
        for (std::size_t i = 1; i < f.size(); ++i) s.params.emplace_back(pnames[i], parse_double(f[i], pp, pn));
        s.step_columns.assign(snames.begin() + 2, snames.end());
        for (std::size_t t = 0; t < u.length(); ++t) {
            if (!std::getline(sin, line)) throw CohortFormatError(sp.string() + ": fewer rows than steps");
            ++sn;
            auto g = split_csv(line);
            if (g.size() != snames.size() || static_cast<std::int64_t>(parse_double(g[0], sp, sn)) != u.unit_id) {
                throw CohortFormatError(sp.string() + ":" + std::to_string(sn) + ": row does not match unit");
            }
            std::vector<double> row;
            for (std::size_t i = 2; i < g.size(); ++i) row.push_back(parse_double(g[i], sp, sn));
            s.steps.push_back(std::move(row));
        }
        u.sim_state = std::move(s);
    }
    return c;
}

std::vector<double> ground_truth_counterfactual(const CohortMeta& meta, const Trajectory& unit, std::size_t origin,
                                                const std::vector<int>& plan) {
    if (!unit.sim_state) {
        throw std::invalid_argument("ground_truth_counterfactual: unit " + std::to_string(unit.unit_id) +
                                    " has no simulator state");
    }
    if (plan.empty()) return {};
    if (origin + plan.size() >= unit.sim_state->steps.size()) {
        throw std::invalid_argument("ground_truth_counterfactual: origin + plan runs past the simulated length");
    }
    std::vector<int> codes(unit.w.begin(), unit.w.begin() + static_cast<std::ptrdiff_t>(origin + 1));
    codes.insert(codes.end(), plan.begin(), plan.end());
    std::vector<double> path;
    if (meta.generator == "tumor") {
        path = tumor_rollout(TumorConfig::from_kv(meta.config), *unit.sim_state, codes);
    } else if (meta.generator == "ehr") {
        path = ehr_rollout(EHRGenConfig::from_kv(meta.config), *unit.sim_state, codes);
    } else {
        throw std::invalid_argument("ground_truth_counterfactual: unknown generator " + meta.generator);
    }
    return std::vector<double>(path.begin() + static_cast<std::ptrdiff_t>(origin + 1), path.end());
}

}  // namespace cfseq
