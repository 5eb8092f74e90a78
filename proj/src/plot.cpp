#include "tsdpo/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "tsdpo/error.hpp"

namespace tsdpo {

namespace {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 70, kRight = 170, kTop = 40, kBottom = 55;

const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

const char* color(std::size_t i) { return kPalette[i % std::size(kPalette)]; }

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

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

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finish() {
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
  }
};

struct Frame {
  Range x, y;
  double px(double v) const { return kLeft + (v - x.lo) / (x.hi - x.lo) * (kWidth - kLeft - kRight); }
  double py(double v) const { return kHeight - kBottom - (v - y.lo) / (y.hi - y.lo) * (kHeight - kTop - kBottom); }
};

void header(std::ostringstream& s, const Axes& axes) {
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << num(kWidth / 2 - kRight / 2 + kLeft / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
    << escape(axes.title) << "</text>\n";
}

void frame_axes(std::ostringstream& s, const Frame& f, const Axes& axes, bool x_ticks) {
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  s << "<rect x=\"" << num(x0) << "\" y=\"" << num(y1) << "\" width=\"" << num(x1 - x0) << "\" height=\""
    << num(y0 - y1) << "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = f.y.lo + (f.y.hi - f.y.lo) * i / 4.0;
    s << "<line x1=\"" << num(x0) << "\" x2=\"" << num(x1) << "\" y1=\"" << num(f.py(yv)) << "\" y2=\""
      << num(f.py(yv)) << "\" stroke=\"#dddddd\"/>\n";
    s << "<text x=\"" << num(x0 - 6) << "\" y=\"" << num(f.py(yv) + 4) << "\" text-anchor=\"end\">" << tick(yv)
      << "</text>\n";
    if (!x_ticks) continue;
    const double xv = f.x.lo + (f.x.hi - f.x.lo) * i / 4.0;
    s << "<text x=\"" << num(f.px(xv)) << "\" y=\"" << num(y0 + 16) << "\" text-anchor=\"middle\">" << tick(xv)
      << "</text>\n";
  }
  s << "<text x=\"" << num((x0 + x1) / 2) << "\" y=\"" << num(kHeight - 12) << "\" text-anchor=\"middle\">"
    << escape(axes.xlabel) << "</text>\n";
  s << "<text transform=\"translate(16," << num((y0 + y1) / 2) << ") rotate(-90)\" text-anchor=\"middle\">"
    << escape(axes.ylabel) << "</text>\n";
}

void legend(std::ostringstream& s, const std::vector<std::string>& labels) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double y = kTop + 8 + 16.0 * static_cast<double>(i);
    s << "<rect x=\"" << num(kWidth - kRight + 12) << "\" y=\"" << num(y - 8) << "\" width=\"10\" height=\"10\" fill=\""
      << color(i) << "\"/>\n";
    s << "<text x=\"" << num(kWidth - kRight + 28) << "\" y=\"" << num(y + 1) << "\">" << escape(labels[i])
      << "</text>\n";
  }
}

}  // namespace

std::string line_chart_svg(const Axes& axes, const std::vector<Series>& series) {
  Frame f;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw ShapeError("chart: series '" + s.label + "' has mismatched x/y");
    for (double v : s.x) f.x.add(v);
    for (double v : s.y) f.y.add(v);
  }
  f.x.finish();
  f.y.finish();
  std::ostringstream out;
  header(out, axes);
  frame_axes(out, f, axes, true);
  std::vector<std::string> labels;
  for (std::size_t k = 0; k < series.size(); ++k) {
    const Series& s = series[k];
    labels.push_back(s.label);
    if (s.lines) {
      out << "<polyline fill=\"none\" stroke=\"" << color(k) << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
        out << num(f.px(s.x[i])) << "," << num(f.py(s.y[i])) << " ";
      }
      out << "\"/>\n";
    }
    if (!s.markers) continue;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      const bool hot = i < s.highlight.size() && s.highlight[i];
      out << "<circle cx=\"" << num(f.px(s.x[i])) << "\" cy=\"" << num(f.py(s.y[i])) << "\" r=\"" << (hot ? 4.5 : 3)
          << "\" stroke=\"" << color(k) << "\" fill=\"" << (hot ? color(k) : "white") << "\"/>\n";
    }
  }
  legend(out, labels);
  out << "</svg>\n";
  return out.str();
}

std::string bar_chart_svg(const Axes& axes, const std::vector<std::string>& categories,
                          const std::vector<BarSeries>& series) {
  Frame f;
  f.x = {0, static_cast<double>(std::max<std::size_t>(categories.size(), 1))};
  f.y.add(0);
  for (const auto& s : series) {
    if (s.values.size() != categories.size()) throw ShapeError("bar chart: series '" + s.label + "' length");
    for (double v : s.values) f.y.add(v);
  }
  f.y.finish();
  std::ostringstream out;
  header(out, axes);
  frame_axes(out, f, axes, false);
  const double group = f.px(1) - f.px(0);
  const double bar = 0.8 * group / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  std::vector<std::string> labels;
  for (std::size_t k = 0; k < series.size(); ++k) {
    labels.push_back(series[k].label);
    for (std::size_t c = 0; c < categories.size(); ++c) {
      const double v = series[k].values[c];
      if (!std::isfinite(v)) continue;
      const double x = f.px(static_cast<double>(c)) + 0.1 * group + bar * static_cast<double>(k);
      const double top = f.py(std::max(v, 0.0)), base = f.py(std::min(v, 0.0));
      out << "<rect x=\"" << num(x) << "\" y=\"" << num(top) << "\" width=\"" << num(bar) << "\" height=\""
          << num(base - top) << "\" fill=\"" << color(k) << "\"/>\n";
    }
  }
  for (std::size_t c = 0; c < categories.size(); ++c)
    out << "<text x=\"" << num(f.px(c + 0.5)) << "\" y=\"" << num(kHeight - kBottom + 16)
        << "\" text-anchor=\"middle\">" << escape(categories[c]) << "</text>\n";
  out << "<line x1=\"" << num(kLeft) << "\" x2=\"" << num(kWidth - kRight) << "\" y1=\"" << num(f.py(0)) << "\" y2=\""
      << num(f.py(0)) << "\" stroke=\"black\"/>\n";
  legend(out, labels);
  out << "</svg>\n";
  return out.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

}  // namespace tsdpo
