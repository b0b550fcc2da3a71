#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "art/errors.hpp"

namespace art {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of doubles. Value semantics; copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const noexcept { return shape_; }
  std::int64_t numel() const noexcept { return static_cast<std::int64_t>(data_.size()); }
  int ndim() const noexcept { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int axis) const;
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  /// Scalar value of a one-element tensor.
  double item() const;

  Tensor reshaped(Shape shape) const;
  /// Copy of the leading-axis slice [begin, end).
  Tensor slice_rows(std::int64_t begin, std::int64_t end) const;
  /// Gathers rows along the leading axis.
  Tensor gather_rows(std::span<const std::int64_t> rows) const;

  Tensor& operator+=(const Tensor& o);
  Tensor& operator-=(const Tensor& o);
  Tensor& operator*=(double s);

 private:
  Shape shape_;
  std::vector<double> data_;
};

Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double s);
/// Elementwise product of equally shaped tensors.
Tensor operator*(Tensor a, const Tensor& b);

/// Stacks equally shaped tensors along a new leading axis.
Tensor stack(std::span<const Tensor> items);
/// Concatenates along the leading axis.
Tensor concat_rows(std::span<const Tensor> items);

double dot(const Tensor& a, const Tensor& b);
double l2_norm(const Tensor& a);
double linf_norm(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& a);

}  // namespace art
