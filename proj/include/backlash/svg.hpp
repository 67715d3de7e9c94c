#pragma once

#include <string>
#include <vector>

namespace backlash {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  /// Draw this series as markers.
  bool points = false;
};

struct PlotOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  bool log_y = false;
  /// Draw markers instead of lines.
  bool markers = false;
};

/// Polylines over a framed axis box with min/max tick labels and a legend.
std::string render_svg(const std::vector<Series>& series, const PlotOptions& opts);
void write_svg(const std::string& path, const std::vector<Series>& series, const PlotOptions& opts);

}  // namespace backlash
