#include "cfseq/expcli/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <stdexcept>

namespace cfseq {

namespace {

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string tick_label(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char ch : s) {
        switch (ch) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += ch;
        }
    }
    return out;
}

// Round step (1, 2 or 5 times a power of ten) giving about n ticks.
double nice_step(double span, int n) {
    const double raw = span / n;
    const double p = std::pow(10.0, std::floor(std::log10(raw)));
    for (double m : {1.0, 2.0, 5.0, 10.0})
        if (raw <= m * p) return m * p;
    return 10.0 * p;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

}  // namespace

std::string line_chart_svg(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                           const std::string& y_label) {
    if (series.empty()) throw std::invalid_argument("line chart: no series to draw");
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : series) {
        if (s.x.size() != s.y.size() || s.x.empty()) throw std::invalid_argument("line chart: bad series " + s.label);
        for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
        for (double v : s.y) y0 = std::min(y0, v), y1 = std::max(y1, v);
    }
    if (x1 == x0) x1 = x0 + 1.0;
    y0 = std::min(0.0, y0);
    if (y1 <= y0) y1 = y0 + 1.0;
    const double ystep = nice_step(y1 - y0, 5);
    y1 = std::ceil(y1 / ystep) * ystep;
    const double xstep = std::max(1.0, nice_step(x1 - x0, 10));

    const double W = 720, H = 440, L = 70, R = 180, T = 40, B = 60;
    const double pw = W - L - R, ph = H - T - B;
    auto sx = [&](double v) { return L + (v - x0) / (x1 - x0) * pw; };
    auto sy = [&](double v) { return T + ph - (v - y0) / (y1 - y0) * ph; };

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << num(L + pw / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title)
      << "</text>\n";
    for (double v = y0; v <= y1 + 1e-9 * ystep; v += ystep) {
        o << "<line x1=\"" << num(L) << "\" x2=\"" << num(L + pw) << "\" y1=\"" << num(sy(v)) << "\" y2=\""
          << num(sy(v)) << "\" stroke=\"#e5e5e5\"/>\n";
        o << "<text x=\"" << num(L - 6) << "\" y=\"" << num(sy(v) + 4) << "\" text-anchor=\"end\">"
          << tick_label(v) << "</text>\n";
    }
    for (double v = std::ceil(x0 / xstep) * xstep; v <= x1 + 1e-9; v += xstep) {
        o << "<line x1=\"" << num(sx(v)) << "\" x2=\"" << num(sx(v)) << "\" y1=\"" << num(T + ph) << "\" y2=\""
          << num(T + ph + 5) << "\" stroke=\"black\"/>\n";
        o << "<text x=\"" << num(sx(v)) << "\" y=\"" << num(T + ph + 19) << "\" text-anchor=\"middle\">"
          << tick_label(v) << "</text>\n";
    }
    o << "<line x1=\"" << num(L) << "\" x2=\"" << num(L + pw) << "\" y1=\"" << num(T + ph) << "\" y2=\""
      << num(T + ph) << "\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << num(L) << "\" x2=\"" << num(L) << "\" y1=\"" << num(T) << "\" y2=\"" << num(T + ph)
      << "\" stroke=\"black\"/>\n";
    o << "<text x=\"" << num(L + pw / 2) << "\" y=\"" << num(H - 15) << "\" text-anchor=\"middle\">"
      << escape(x_label) << "</text>\n";
    o << "<text transform=\"translate(18," << num(T + ph / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
      << escape(y_label) << "</text>\n";

    for (std::size_t i = 0; i < series.size(); ++i) {
        const auto& s = series[i];
        const char* color = kPalette[i % (sizeof kPalette / sizeof kPalette[0])];
        o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (std::size_t k = 0; k < s.x.size(); ++k) o << (k ? " " : "") << num(sx(s.x[k])) << ',' << num(sy(s.y[k]));
        o << "\"/>\n";
        for (std::size_t k = 0; k < s.x.size(); ++k)
            o << "<circle cx=\"" << num(sx(s.x[k])) << "\" cy=\"" << num(sy(s.y[k])) << "\" r=\"3\" fill=\"" << color
              << "\"/>\n";
        const double ly = T + 10 + 20.0 * static_cast<double>(i);
        o << "<line x1=\"" << num(L + pw + 15) << "\" x2=\"" << num(L + pw + 40) << "\" y1=\"" << num(ly)
          << "\" y2=\"" << num(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        o << "<text x=\"" << num(L + pw + 46) << "\" y=\"" << num(ly + 4) << "\">" << escape(s.label) << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

std::vector<Series> series_from_report(const std::string& csv_text, const std::string& prefix) {
    std::istringstream in(csv_text);
    std::string line;
    if (!std::getline(in, line) || line != "variant,horizon,rmse,nrmse,n_queries,seed_count,norm_const") {
        throw std::invalid_argument("not a report CSV (unexpected header)");
    }
    std::vector<std::string> order;
    std::map<std::string, Series> by;
    std::size_t n = 1;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::string cell;
        std::istringstream row(line);
        while (std::getline(row, cell, ',')) f.push_back(cell);
        if (f.size() != 7) throw std::invalid_argument("report CSV line " + std::to_string(n) + ": expected 7 fields");
        const std::string label = prefix.empty() ? f[0] : prefix + ":" + f[0];
        if (!by.count(label)) {
            order.push_back(label);
            by[label].label = label;
        }
        by[label].x.push_back(std::stod(f[1]));
        by[label].y.push_back(100.0 * std::stod(f[3]));
    }
    std::vector<Series> out;
    for (const auto& k : order) out.push_back(by[k]);
    return out;
}

}  // namespace cfseq
