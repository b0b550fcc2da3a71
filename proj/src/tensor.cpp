#include "art/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <numeric>

namespace art {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw InputError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  return fmt::format("({})", fmt::join(shape, ","));
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw InputError(fmt::format("tensor shape {} does not match {} elements", shape_str(shape_), data_.size()));
  }
}

std::int64_t Tensor::dim(int axis) const {
  if (axis < 0) axis += ndim();
  if (axis < 0 || axis >= ndim()) throw InputError(fmt::format("axis {} out of range for shape {}", axis, shape_str(shape_)));
  return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (data_.size() != 1) throw InputError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw InputError(fmt::format("cannot reshape {} to {}", shape_str(shape_), shape_str(shape)));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::slice_rows(std::int64_t begin, std::int64_t end) const {
  if (ndim() == 0 || begin < 0 || end > shape_[0] || begin > end) {
    throw InputError(fmt::format("row slice [{},{}) invalid for shape {}", begin, end, shape_str(shape_)));
  }
  const std::int64_t row = shape_[0] == 0 ? 0 : numel() / shape_[0];
  Shape s = shape_;
  s[0] = end - begin;
  return Tensor(std::move(s), std::vector<double>(data_.begin() + begin * row, data_.begin() + end * row));
}

Tensor Tensor::gather_rows(std::span<const std::int64_t> rows) const {
  if (ndim() == 0) throw InputError("gather_rows on scalar");
  const std::int64_t row = shape_[0] == 0 ? 0 : numel() / shape_[0];
  Shape s = shape_;
  s[0] = static_cast<std::int64_t>(rows.size());
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(row) * rows.size());
  for (auto r : rows) {
    if (r < 0 || r >= shape_[0]) throw InputError(fmt::format("row {} out of range {}", r, shape_[0]));
    out.insert(out.end(), data_.begin() + r * row, data_.begin() + (r + 1) * row);
  }
  return Tensor(std::move(s), std::move(out));
}

Tensor& Tensor::operator+=(const Tensor& o) {
  if (o.shape_ != shape_) throw InputError("+= shape mismatch " + shape_str(shape_) + " vs " + shape_str(o.shape_));
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& o) {
  if (o.shape_ != shape_) throw InputError("-= shape mismatch " + shape_str(shape_) + " vs " + shape_str(o.shape_));
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (auto& v : data_) v *= s;
  return *this;
}

Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
Tensor operator*(Tensor a, double s) { return a *= s; }

Tensor operator*(Tensor a, const Tensor& b) {
  if (a.shape() != b.shape()) throw InputError("* shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto ad = a.data();
  const auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) ad[i] *= bd[i];
  return a;
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw InputError("stack of zero tensors");
  Shape s{static_cast<std::int64_t>(items.size())};
  s.insert(s.end(), items[0].shape().begin(), items[0].shape().end());
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(shape_numel(s)));
  for (const auto& t : items) {
    if (t.shape() != items[0].shape()) throw InputError("stack shape mismatch");
    out.insert(out.end(), t.storage().begin(), t.storage().end());
  }
  return Tensor(std::move(s), std::move(out));
}

Tensor concat_rows(std::span<const Tensor> items) {
  if (items.empty()) throw InputError("concat of zero tensors");
  Shape s = items[0].shape();
  if (s.empty()) throw InputError("concat of scalars");
  s[0] = 0;
  std::vector<double> out;
  for (const auto& t : items) {
    if (t.ndim() != static_cast<int>(s.size()) || !std::equal(s.begin() + 1, s.end(), t.shape().begin() + 1)) {
      throw InputError("concat shape mismatch");
    }
    s[0] += t.shape()[0];
    out.insert(out.end(), t.storage().begin(), t.storage().end());
  }
  return Tensor(std::move(s), std::move(out));
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw InputError("dot length mismatch");
  return std::inner_product(a.storage().begin(), a.storage().end(), b.storage().begin(), 0.0);
}

double l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

double linf_norm(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw InputError("max_abs_diff length mismatch");
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool all_finite(const Tensor& a) {
  return std::all_of(a.storage().begin(), a.storage().end(), [](double v) { return std::isfinite(v); });
}

}  // namespace art
