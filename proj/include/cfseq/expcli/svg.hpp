#pragma once

#include <string>
#include <vector>

namespace cfseq {

struct Series {
    std::string label;
    std::vector<double> x, y;
};

/// Standalone SVG line chart with axes, ticks and a legend.
std::string line_chart_svg(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                           const std::string& y_label);

/// Report CSV rows grouped into one NRMSE series per variant; y in percent.
std::vector<Series> series_from_report(const std::string& csv_text, const std::string& prefix);

}  // namespace cfseq
