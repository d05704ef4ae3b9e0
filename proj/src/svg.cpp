// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#include "kcircuits/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace kc {
namespace {

constexpr double kWidth = 640, kHeight = 400;
constexpr double kLeft = 70, kRight = 170, kTop = 50, kBottom = 50;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string escape(const std::string& s) {
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

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_label(double v, double step) {
  char buf[32];
  if (step >= 1.0 && std::fabs(v - std::round(v)) < 1e-9) {
    std::snprintf(buf, sizeof buf, "%.0f", v);
  } else {
    const int digits = std::clamp(static_cast<int>(std::ceil(-std::log10(step))), 0, 6);
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  }
  return buf;
}

struct Range {
  double lo = 0, hi = 1;
};

// Pads degenerate ranges so a single value still gets an axis.
Range padded(double lo, double hi) {
  if (!(lo <= hi)) return {0, 1};
  if (hi - lo < 1e-12) {
    const double pad = std::max(std::fabs(lo) * 0.1, 0.5);
    return {lo - pad, hi + pad};
  }
  return {lo, hi};
}

std::vector<double> ticks(Range r, int target = 5) {
  const double raw = (r.hi - r.lo) / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double step = mag;
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (m * mag >= raw) {
      step = m * mag;
      break;
    }
  }
  std::vector<double> out;
  for (double v = std::ceil(r.lo / step) * step; v <= r.hi + step * 1e-9; v += step) {
    out.push_back(std::fabs(v) < step * 1e-9 ? 0.0 : v);
  }
  return out;
}

}  // namespace

std::string render_svg(const Chart& chart, const std::string& comment) {
  double xlo = INFINITY, xhi = -INFINITY, ylo = INFINITY, yhi = -INFINITY;
  for (const auto& s : chart.series) {
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      xlo = std::min(xlo, s.x[i]);
      xhi = std::max(xhi, s.x[i]);
      ylo = std::min(ylo, s.y[i]);
      yhi = std::max(yhi, s.y[i]);
    }
  }
  const Range xr = padded(xlo, xhi), yr = padded(ylo, yhi);
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (x - xr.lo) / (xr.hi - xr.lo) * pw; };
  auto py = [&](double y) { return kTop + ph - (y - yr.lo) / (yr.hi - yr.lo) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  if (!comment.empty()) os << "<!-- " << escape(comment) << " -->\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kLeft << "\" y=\"20\" font-size=\"14\">" << escape(chart.title) << "</text>\n";
  for (std::size_t i = 0; i < chart.notes.size(); ++i) {
    os << "<text x=\"" << kLeft << "\" y=\"" << 34 + 11 * i << "\" fill=\"#555\">" << escape(chart.notes[i])
       << "</text>\n";
  }

  const auto xt = ticks(xr), yt = ticks(yr);
  const double xstep = xt.size() > 1 ? xt[1] - xt[0] : 1.0, ystep = yt.size() > 1 ? yt[1] - yt[0] : 1.0;
  for (double v : yt) {
    os << "<line x1=\"" << kLeft << "\" x2=\"" << kLeft + pw << "\" y1=\"" << num(py(v)) << "\" y2=\"" << num(py(v))
       << "\" stroke=\"#eee\"/>\n";
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << num(py(v) + 4) << "\" text-anchor=\"end\">" << tick_label(v, ystep)
       << "</text>\n";
  }
  for (double v : xt) {
    os << "<line x1=\"" << num(px(v)) << "\" x2=\"" << num(px(v)) << "\" y1=\"" << kTop + ph << "\" y2=\""
       << kTop + ph + 4 << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << num(px(v)) << "\" y=\"" << kTop + ph + 16 << "\" text-anchor=\"middle\">"
       << tick_label(v, xstep) << "</text>\n";
  }
  os << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n";
  os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 12 << "\" text-anchor=\"middle\">"
     << escape(chart.x_label) << "</text>\n";
  os << "<text transform=\"translate(16," << kTop + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
     << escape(chart.y_label) << "</text>\n";

  if (std::isfinite(chart.marker_x) && chart.marker_x >= xr.lo && chart.marker_x <= xr.hi) {
    const double mx = px(chart.marker_x);
    os << "<line x1=\"" << num(mx) << "\" x2=\"" << num(mx) << "\" y1=\"" << kTop << "\" y2=\"" << kTop + ph
       << "\" stroke=\"#888\" stroke-dasharray=\"2,3\"/>\n";
    os << "<text x=\"" << num(mx + 3) << "\" y=\"" << kTop + 12 << "\" fill=\"#555\">" << escape(chart.marker_label)
       << "</text>\n";
  }

  for (std::size_t si = 0; si < chart.series.size(); ++si) {
    const auto& s = chart.series[si];
    const char* color = kPalette[si % std::size(kPalette)];
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i])) pts.emplace_back(px(s.x[i]), py(s.y[i]));
    }
    if (pts.size() > 1) {
      os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\"";
      if (s.dashed) os << " stroke-dasharray=\"5,3\"";
      os << " points=\"";
      for (std::size_t i = 0; i < pts.size(); ++i) os << (i ? " " : "") << num(pts[i].first) << "," << num(pts[i].second);
      os << "\"/>\n";
    }
    for (const auto& [x, y] : pts) {
      os << "<circle cx=\"" << num(x) << "\" cy=\"" << num(y) << "\" r=\"" << (pts.size() == 1 ? 4 : 2)
         << "\" fill=\"" << color << "\"/>\n";
    }
    const double ly = kTop + 8 + 16.0 * static_cast<double>(si);
    os << "<line x1=\"" << kLeft + pw + 10 << "\" x2=\"" << kLeft + pw + 30 << "\" y1=\"" << ly << "\" y2=\"" << ly
       << "\" stroke=\"" << color << "\" stroke-width=\"2\"" << (s.dashed ? " stroke-dasharray=\"5,3\"" : "")
       << "/>\n";
    os << "<text x=\"" << kLeft + pw + 34 << "\" y=\"" << ly + 4 << "\">" << escape(s.name) << "</text>\n";
  }
  if (chart.series.empty() || !(xlo <= xhi)) {
    os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kTop + ph / 2 << "\" text-anchor=\"middle\" fill=\"#888\">"
       << "no data</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace kc
