#pragma once

// Value-level numeric kernels behind the autograd ops.

#include <cmath>
#include <vector>

#include "art/tensor.hpp"

namespace art::kernels {

Shape broadcast_shape(const Shape& a, const Shape& b);

/// Strides of `in` aligned to `out` (left-padded), with 0 for broadcast axes.
std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out);

/// Walks `out` in row-major order, calling f(out_index, offset_a, offset_b).
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::int64_t>& sa, const std::vector<std::int64_t>& sb,
                        F&& f) {
  const int d = static_cast<int>(out.size());
  const std::int64_t total = shape_numel(out);
  if (total == 0) return;
  if (d == 0) {
    f(0, 0, 0);
    return;
  }
  const std::int64_t inner = out[d - 1];
  const std::int64_t ia = sa[d - 1], ib = sb[d - 1];
  std::vector<std::int64_t> idx(d, 0);
  std::int64_t oa = 0, ob = 0, o = 0;
  while (o < total) {
    std::int64_t pa = oa, pb = ob;
    for (std::int64_t j = 0; j < inner; ++j, ++o, pa += ia, pb += ib) f(o, pa, pb);
    for (int ax = d - 2; ax >= 0; --ax) {
      ++idx[ax];
      oa += sa[ax];
      ob += sb[ax];
      if (idx[ax] < out[ax]) break;
      oa -= sa[ax] * out[ax];
      ob -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

template <class F>
Tensor binary(const Tensor& a, const Tensor& b, F f) {
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (std::int64_t i = 0; i < a.numel(); ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  const Shape os = broadcast_shape(a.shape(), b.shape());
  Tensor out(os);
  const auto sa = broadcast_strides(a.shape(), os);
  const auto sb = broadcast_strides(b.shape(), os);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for_each_broadcast(os, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) { po[o] = f(pa[ia], pb[ib]); });
  return out;
}

template <class F>
Tensor unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  const double* pa = a.data().data();
  double* po = out.data().data();
  for (std::int64_t i = 0; i < a.numel(); ++i) po[i] = f(pa[i]);
  return out;
}

Tensor expand(const Tensor& a, const Shape& shape);
Tensor sum_to(const Tensor& a, const Shape& shape);

Tensor transpose(const Tensor& a);
Tensor matmul(const Tensor& a, const Tensor& b);

struct ConvDims {
  std::int64_t n, c, h, w;     // input
  std::int64_t o, kh, kw;      // weight
  std::int64_t ho, wo;         // output
  int stride, padding;
};

ConvDims conv_dims(const Shape& x, const Shape& w, int stride, int padding);

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding);
Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, const Shape& input_shape, int stride, int padding);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, const Shape& weight_shape, int stride, int padding);

Tensor softmax_rows(const Tensor& z);
Tensor logsumexp_rows(const Tensor& z);

inline double softplus(double z, double beta) {
  const double t = beta * z;
  // log1p(exp(t)) without overflow
  return (t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t))) / beta;
}

inline double sigmoid(double z, double beta) {
  const double t = beta * z;
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

}  // namespace art::kernels
