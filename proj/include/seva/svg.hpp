#pragma once

// Minimal SVG charts for run reports: grouped bars and multi-series lines.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "seva/tensor.hpp"

namespace seva::svg {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct Bar {
  std::string label;
  double value = 0.0;
};

namespace detail {

inline constexpr int kWidth = 520, kHeight = 320, kLeft = 60, kRight = 20, kTop = 36, kBottom = 48;
inline const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

inline std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string header(const std::string& title) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kWidth / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" << escape(title) << "</text>\n";
  return os.str();
}

inline std::string axes(double lo, double hi, const std::string& xlabel, const std::string& ylabel) {
  std::ostringstream os;
  const int x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  os << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x1 << "\" y2=\"" << y0 << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << x0 << "\" y1=\"" << y0 << "\" x2=\"" << x0 << "\" y2=\"" << y1 << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    const double y = y0 - (y0 - y1) * k / 4.0;
    os << "<text x=\"" << x0 - 6 << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">" << num(v) << "</text>\n";
  }
  os << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << kHeight - 8 << "\" text-anchor=\"middle\">" << escape(xlabel) << "</text>\n"
     << "<text x=\"14\" y=\"" << (y0 + y1) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " << (y0 + y1) / 2 << ")\">"
     << escape(ylabel) << "</text>\n";
  return os.str();
}

}  // namespace detail

// Value range padded so that flat data still gets a visible axis.
inline std::pair<double, double> value_range(std::vector<double> v, bool include_zero) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return !std::isfinite(x); }), v.end());
  double lo = v.empty() ? 0.0 : *std::min_element(v.begin(), v.end());
  double hi = v.empty() ? 1.0 : *std::max_element(v.begin(), v.end());
  if (include_zero) {
    lo = std::min(lo, 0.0);
    hi = std::max(hi, 0.0);
  }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  return {lo, hi};
}

inline std::string bar_chart(const std::string& title, const std::vector<Bar>& bars, const std::string& ylabel) {
  using namespace detail;
  std::vector<double> vals;
  for (const auto& b : bars) vals.push_back(b.value);
  auto [lo, hi] = value_range(vals, true);
  std::ostringstream os;
  os << header(title) << axes(lo, hi, "", ylabel);
  const double plot_w = kWidth - kLeft - kRight, y0 = kHeight - kBottom, y1 = kTop;
  const double slot = bars.empty() ? plot_w : plot_w / static_cast<double>(bars.size());
  auto ypos = [&](double v) { return y0 - (y0 - y1) * (v - lo) / (hi - lo); };
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double x = kLeft + slot * (static_cast<double>(i) + 0.15);
    const double ya = ypos(std::max(bars[i].value, 0.0)), yb = ypos(std::min(bars[i].value, 0.0));
    os << "<rect x=\"" << num(x) << "\" y=\"" << num(ya) << "\" width=\"" << num(slot * 0.7) << "\" height=\"" << num(yb - ya)
       << "\" fill=\"" << kPalette[i % 6] << "\"/>\n"
       << "<text x=\"" << num(x + slot * 0.35) << "\" y=\"" << num(ya - 4) << "\" text-anchor=\"middle\">" << num(bars[i].value) << "</text>\n"
       << "<text x=\"" << num(x + slot * 0.35) << "\" y=\"" << num(y0 + 14) << "\" text-anchor=\"middle\">" << escape(bars[i].label)
       << "</text>\n";
  }
  return os.str() + "</svg>\n";
}

inline std::string line_chart(const std::string& title, const std::vector<Series>& series, const std::string& xlabel,
                              const std::string& ylabel) {
  using namespace detail;
  std::vector<double> xs, ys;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw Error("svg: series " + s.name + " has mismatched x/y lengths");
    xs.insert(xs.end(), s.x.begin(), s.x.end());
    ys.insert(ys.end(), s.y.begin(), s.y.end());
  }
  auto [xlo, xhi] = value_range(xs, false);
  auto [ylo, yhi] = value_range(ys, false);
  std::ostringstream os;
  os << header(title) << axes(ylo, yhi, xlabel, ylabel);
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  for (int k = 0; k <= 4; ++k) {
    const double v = xlo + (xhi - xlo) * k / 4.0;
    os << "<text x=\"" << num(x0 + (x1 - x0) * k / 4.0) << "\" y=\"" << num(y0 + 14) << "\" text-anchor=\"middle\">" << num(v) << "</text>\n";
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* colour = kPalette[s % 6];
    os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < series[s].x.size(); ++i) {
      if (!std::isfinite(series[s].y[i])) continue;
      os << num(x0 + (x1 - x0) * (series[s].x[i] - xlo) / (xhi - xlo)) << ','
         << num(y0 - (y0 - y1) * (series[s].y[i] - ylo) / (yhi - ylo)) << ' ';
    }
    os << "\"/>\n"
       << "<text x=\"" << x1 - 4 << "\" y=\"" << kTop + 14 * (static_cast<int>(s) + 1) << "\" text-anchor=\"end\" fill=\"" << colour
       << "\">" << escape(series[s].name) << "</text>\n";
  }
  return os.str() + "</svg>\n";
}

inline void save(const std::string& path, const std::string& doc) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << doc;
}

}  // namespace seva::svg
