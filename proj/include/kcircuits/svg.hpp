// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0
//
// Minimal SVG line charts: axes, ticks, labels, a legend, one polyline per
// series. Single-point series are drawn as markers.

#pragma once

#include <limits>
#include <string>
#include <vector>

namespace kc {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;  // non-finite values are skipped
  bool dashed = false;
};

struct Chart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  std::vector<std::string> notes;  // printed under the title
  /// Vertical marker, e.g. a detected breakpoint; ignored when NaN.
  double marker_x = std::numeric_limits<double>::quiet_NaN();
  std::string marker_label;
};

std::string render_svg(const Chart& chart, const std::string& comment = "");

}  // namespace kc
