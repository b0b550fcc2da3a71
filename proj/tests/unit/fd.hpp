#pragma once

// Central finite differences, used as an oracle independent of the autograd
// backward rules.

#include <functional>
#include <random>

#include "art/tensor.hpp"

namespace art::testing {

inline Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double numeric_partial(const std::function<double(const Tensor&)>& f, const Tensor& x, std::int64_t i,
                              double h) {
  Tensor probe = x;
  probe[i] = x[i] + h;
  const double up = f(probe);
  probe[i] = x[i] - h;
  const double down = f(probe);
  return (up - down) / (2 * h);
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.data()) v = d(rng);
  return t;
}

/// max |a-b| / max(|b|_inf, floor)
inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-8) {
  double scale = floor;
  for (double v : b.data()) scale = std::max(scale, std::abs(v));
  return max_abs_diff(a, b) / scale;
}

}  // namespace art::testing
