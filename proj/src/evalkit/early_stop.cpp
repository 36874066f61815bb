#include "cfseq/evalkit/early_stop.hpp"

#include <stdexcept>

namespace cfseq {

EarlyStopMonitor::EarlyStopMonitor(double min_delta, std::size_t patience)
    : min_delta_(min_delta), patience_(patience) {
    if (patience < 1) throw std::invalid_argument("early_stop_monitor: patience must be at least 1");
}

bool EarlyStopMonitor::update(double value) {
    // reference_ tracks the last value that counted as an improvement;
    // best_ is the plain minimum, which may differ by less than min_delta.
    improved_last_ = false;
    if (value < best_) {
        best_ = value;
        best_index_ = count_;
        improved_last_ = true;
    }
    if (reference_ - value > min_delta_) {
        reference_ = value;
        stale_ = 0;
    } else {
        ++stale_;
    }
    ++count_;
    return stale_ >= patience_;
}

StopDecision early_stop_monitor(const std::vector<double>& history, double min_delta, std::size_t patience) {
    EarlyStopMonitor m(min_delta, patience);
    StopDecision d;
    for (double v : history) {
        if (m.update(v)) {
            d.stop = true;
            break;
        }
    }
    d.best_index = m.best_index();
    return d;
}

}  // namespace cfseq
