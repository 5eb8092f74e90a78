#pragma once

#include <string>
#include <vector>

namespace tsdpo {

/// Minimal self-contained SVG charts. Output depends only on the inputs.

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  bool lines = true;
  bool markers = false;
  /// Per-point emphasis (drawn filled and larger); empty means none.
  std::vector<bool> highlight;
};

struct Axes {
  std::string title;
  std::string xlabel;
  std::string ylabel;
};

std::string line_chart_svg(const Axes& axes, const std::vector<Series>& series);

/// Grouped bars: one group per category, one bar per series value.
struct BarSeries {
  std::string label;
  std::vector<double> values;  // one per category; NaN leaves a gap
};

std::string bar_chart_svg(const Axes& axes, const std::vector<std::string>& categories,
                          const std::vector<BarSeries>& series);

/// Writes `text` to `path`, creating parent directories.
void write_text_file(const std::string& path, const std::string& text);

}  // namespace tsdpo
