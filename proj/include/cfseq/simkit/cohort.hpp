#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfseq {

/// Generator parameters of one simulated unit plus its per-step record
/// (noise draws and other treatment-independent terms).
struct SimState {
    std::vector<std::pair<std::string, double>> params;
    std::vector<std::string> step_columns;
    std::vector<std::vector<double>> steps;  // one row per simulated step

    double param(const std::string& name) const;
    std::size_t column(const std::string& name) const;
};

struct Trajectory {
    std::int64_t unit_id = 0;
    std::vector<double> v;               // static covariates
    std::vector<std::vector<double>> x;  // [T][d_x]
    std::vector<int> w;                  // treatment codes
    std::vector<double> y;
    std::size_t active_len = 0;
    std::optional<SimState> sim_state;

    std::size_t length() const { return y.size(); }
};

using KeyValues = std::map<std::string, std::string>;

struct CohortMeta {
    std::string generator;  // "tumor" or "ehr"
    KeyValues config;       // full generator config, flattened
    std::uint64_t seed = 0;
    std::size_t d_x = 0;
    std::size_t d_v = 0;
    std::size_t n_treatments = 0;  // K
    std::size_t max_len = 0;
    double y_offset = 0.0;  // scaled outcome = (y - y_offset) / y_scale
    double y_scale = 1.0;
    std::size_t overlap_violations = 0;
    std::string fingerprint;  // experiment config that produced the cohort, if any
};

struct Cohort {
    CohortMeta meta;
    std::vector<Trajectory> units;
};

class CohortFormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Writes `<stem>.csv`, `<stem>.meta` and, when units carry sim_state,
/// `<stem>.params.csv` and `<stem>.state.csv` into dir.
void write_cohort(const Cohort& cohort, const std::filesystem::path& dir, const std::string& stem);
Cohort read_cohort(const std::filesystem::path& dir, const std::string& stem);

/// Files write_cohort produces for the given cohort, in a fixed order.
std::vector<std::filesystem::path> cohort_files(const std::filesystem::path& dir, const std::string& stem,
                                                bool with_state);

std::string format_double(double v);
void write_key_values(const KeyValues& kv, const std::filesystem::path& path);
KeyValues read_key_values(const std::filesystem::path& path);

/// Potential outcomes Y_{t+1..t+len(plan)} under the forced plan, re-rolled
/// from the recorded generator state. Treatments up to and including t stay
/// factual.
std::vector<double> ground_truth_counterfactual(const CohortMeta& meta, const Trajectory& unit, std::size_t origin,
                                                const std::vector<int>& plan);

}  // namespace cfseq
