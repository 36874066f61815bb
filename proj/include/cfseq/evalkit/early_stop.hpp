#pragma once

#include <cstddef>
#include <limits>
#include <vector>

namespace cfseq {

struct StopDecision {
    bool stop = false;
    std::size_t best_index = 0;  // global minimizer so far
};

/// Stops after `patience` consecutive values that fail to improve on the
/// best so far by more than min_delta (an improvement of exactly min_delta
/// does not count).
StopDecision early_stop_monitor(const std::vector<double>& history, double min_delta, std::size_t patience);

/// Incremental form used by the training loops.
class EarlyStopMonitor {
public:
    EarlyStopMonitor(double min_delta, std::size_t patience);

    /// Records one value; returns true when training should stop.
    bool update(double value);
    bool improved_last() const { return improved_last_; }
    std::size_t best_index() const { return best_index_; }
    double best_value() const { return best_; }

private:
    double min_delta_;
    std::size_t patience_;
    double reference_ = std::numeric_limits<double>::infinity();
    double best_ = std::numeric_limits<double>::infinity();
    std::size_t best_index_ = 0;
    std::size_t count_ = 0;
    std::size_t stale_ = 0;
    bool improved_last_ = false;
};

}  // namespace cfseq
