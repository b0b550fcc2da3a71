#include "art/plot.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <limits>

namespace art {

namespace {

constexpr int kWidth = 480;
constexpr int kHeight = 320;
constexpr int kLeft = 56;
constexpr int kRight = 16;
constexpr int kTop = 28;
constexpr int kBottom = 44;
constexpr Rgb kBlack{0, 0, 0};
constexpr Rgb kGrid{225, 225, 225};

double quantile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  double pos = q * static_cast<double>(sorted.size() - 1);
  auto lo = static_cast<std::size_t>(std::floor(pos));
  auto hi = std::min(lo + 1, sorted.size() - 1);
  double t = pos - static_cast<double>(lo);
  return sorted[lo] * (1 - t) + sorted[hi] * t;
}

std::string tick_label(double v) {
  if (v == 0.0) return "0";
  double a = std::fabs(v);
  if (a >= 100 || a < 0.01) return fmt::format("{:.2g}", v);
  if (a >= 10) return fmt::format("{:.0f}", v);
  return fmt::format("{:.2f}", v);
}

struct Frame {
  double x0, x1, y0, y1;
  int px(double x) const {
    double t = x1 > x0 ? (x - x0) / (x1 - x0) : 0.5;
    return kLeft + static_cast<int>(std::lround(t * (kWidth - kLeft - kRight)));
  }
  int py(double y) const {
    double t = y1 > y0 ? (y - y0) / (y1 - y0) : 0.5;
    return kHeight - kBottom - static_cast<int>(std::lround(t * (kHeight - kTop - kBottom)));
  }
};

std::pair<double, double> padded_range(double lo, double hi) {
  if (!std::isfinite(lo) || !std::isfinite(hi)) return {0.0, 1.0};
  if (hi - lo < 1e-12) return {lo - 0.5, hi + 0.5};
  double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

void draw_axes(Image& img, const Frame& f, const std::string& title, const std::string& x_label,
               const std::string& y_label, bool x_ticks) {
  int left = kLeft, right = kWidth - kRight, top = kTop, bottom = kHeight - kBottom;
  for (int i = 0; i <= 4; ++i) {
    double v = f.y0 + (f.y1 - f.y0) * i / 4.0;
    int y = f.py(v);
    img.draw_line(left, y, right, y, kGrid);
    std::string s = tick_label(v);
    img.draw_text(left - 4 - text_width(s), y - 3, s, kBlack);
  }
  if (x_ticks) {
    for (int i = 0; i <= 4; ++i) {
      double v = f.x0 + (f.x1 - f.x0) * i / 4.0;
      int x = f.px(v);
      img.draw_line(x, bottom, x, bottom + 3, kBlack);
      std::string s = tick_label(v);
      img.draw_text(x - text_width(s) / 2, bottom + 6, s, kBlack);
    }
  }
  img.draw_line(left, top, left, bottom, kBlack);
  img.draw_line(left, bottom, right, bottom, kBlack);
  img.draw_text((kWidth - text_width(title, 2)) / 2, 6, title, kBlack, 2);
  img.draw_text((kWidth - text_width(x_label)) / 2, kHeight - 12, x_label, kBlack);
  for (std::size_t i = 0; i < y_label.size(); ++i)
    img.draw_text(4, kTop + static_cast<int>(i) * 9, std::string_view(&y_label[i], 1), kBlack);
}

void draw_marker(Image& img, int x, int y, Rgb c) { img.fill_rect(x - 2, y - 2, x + 2, y + 2, c); }

}  // namespace

BoxStats box_stats(std::vector<double> values) {
  BoxStats s;
  std::erase_if(values, [](double v) { return !std::isfinite(v); });
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  s.q1 = quantile(values, 0.25);
  s.median = quantile(values, 0.5);
  s.q3 = quantile(values, 0.75);
  double iqr = s.q3 - s.q1;
  double lo_fence = s.q1 - 1.5 * iqr, hi_fence = s.q3 + 1.5 * iqr;
  s.low = s.q1;
  s.high = s.q3;
  for (double v : values) {
    if (v < lo_fence || v > hi_fence) {
      s.outliers.push_back(v);
    } else {
      s.low = std::min(s.low, v);
      s.high = std::max(s.high, v);
    }
  }
  return s;
}

Rgb series_color(std::size_t i) {
  static constexpr Rgb palette[] = {{31, 119, 180}, {214, 39, 40},  {44, 160, 44},  {255, 127, 14},
                                    {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {127, 127, 127}};
  return palette[i % std::size(palette)];
}

Image line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                std::span<const Series> series, std::optional<std::pair<double, double>> y_range) {
  Image img(kWidth, kHeight);
  double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo, ylo = xlo, yhi = -xlo;
  for (const auto& s : series) {
    for (double x : s.x) xlo = std::min(xlo, x), xhi = std::max(xhi, x);
    for (double y : s.y)
      if (std::isfinite(y)) ylo = std::min(ylo, y), yhi = std::max(yhi, y);
  }
  auto [fx0, fx1] = padded_range(xlo, xhi);
  auto [fy0, fy1] = y_range ? *y_range : padded_range(ylo, yhi);
  Frame f{fx0, fx1, fy0, fy1};
  draw_axes(img, f, title, x_label, y_label, true);
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    Rgb c = series_color(k);
    std::size_t n = std::min(s.x.size(), s.y.size());
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(s.y[i])) continue;
      draw_marker(img, f.px(s.x[i]), f.py(s.y[i]), c);
      if (i + 1 < n && std::isfinite(s.y[i + 1]))
        img.draw_line(f.px(s.x[i]), f.py(s.y[i]), f.px(s.x[i + 1]), f.py(s.y[i + 1]), c);
    }
    int ly = kTop + 4 + static_cast<int>(k) * 11;
    int lx = kWidth - kRight - 8 - text_width(s.name) - 14;
    img.fill_rect(lx, ly, lx + 8, ly + 6, c);
    img.draw_text(lx + 12, ly, s.name, kBlack);
  }
  return img;
}

Image box_plot(const std::string& title, const std::string& y_label, std::span<const BoxGroup> groups,
               std::optional<std::pair<double, double>> y_range) {
  Image img(kWidth, kHeight);
  std::vector<BoxStats> stats;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& g : groups) {
    stats.push_back(box_stats(g.values));
    for (double v : g.values)
      if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
  }
  auto [fy0, fy1] = y_range ? *y_range : padded_range(lo, hi);
  double n = static_cast<double>(std::max<std::size_t>(groups.size(), 1));
  Frame f{0.0, n, fy0, fy1};
  draw_axes(img, f, title, "", y_label, false);
  int half = std::max(4, (f.px(1.0) - f.px(0.0)) / 4);
  for (std::size_t k = 0; k < groups.size(); ++k) {
    const auto& s = stats[k];
    Rgb c = series_color(k);
    int cx = f.px(static_cast<double>(k) + 0.5);
    if (!groups[k].values.empty()) {
      img.draw_line(cx, f.py(s.low), cx, f.py(s.q1), kBlack);
      img.draw_line(cx, f.py(s.q3), cx, f.py(s.high), kBlack);
      img.draw_line(cx - half / 2, f.py(s.low), cx + half / 2, f.py(s.low), kBlack);
      img.draw_line(cx - half / 2, f.py(s.high), cx + half / 2, f.py(s.high), kBlack);
      img.fill_rect(cx - half, f.py(s.q3), cx + half, f.py(s.q1), c);
      img.draw_rect(cx - half, f.py(s.q3), cx + half, f.py(s.q1), kBlack);
      img.draw_line(cx - half, f.py(s.median), cx + half, f.py(s.median), kBlack);
      for (double o : s.outliers) img.draw_rect(cx - 1, f.py(o) - 1, cx + 1, f.py(o) + 1, c);
    }
    const auto& name = groups[k].name;
    img.draw_text(cx - text_width(name) / 2, kHeight - kBottom + 6, name, kBlack);
  }
  return img;
}

}  // namespace art
