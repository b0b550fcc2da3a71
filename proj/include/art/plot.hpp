#pragma once

// Minimal raster charts for reports: line plots and box plots.

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "art/image.hpp"

namespace art {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct BoxGroup {
  std::string name;
  std::vector<double> values;
};

/// Quartiles by linear interpolation; whiskers at the most extreme values
/// within 1.5 IQR of the box.
struct BoxStats {
  double q1 = 0, median = 0, q3 = 0, low = 0, high = 0;
  std::vector<double> outliers;
};
BoxStats box_stats(std::vector<double> values);

Rgb series_color(std::size_t i);

Image line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                std::span<const Series> series, std::optional<std::pair<double, double>> y_range = std::nullopt);
Image box_plot(const std::string& title, const std::string& y_label, std::span<const BoxGroup> groups,
               std::optional<std::pair<double, double>> y_range = std::nullopt);

}  // namespace art
