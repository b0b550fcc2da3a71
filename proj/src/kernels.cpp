#include "kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <fmt/format.h>
#include <limits>

namespace art::kernels {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

Shape left_pad(const Shape& s, std::size_t d) {
  Shape out(d - s.size(), 1);
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

// col[(c*kh+i)*kw+j, n*P + oy*wo + ox] = x[n, c, oy*s-p+i, ox*s-p+j] (0 outside)
void im2col(const double* x, const ConvDims& d, double* col) {
  const std::int64_t p = d.ho * d.wo;
  const std::int64_t cols = d.n * p;
  for (std::int64_t c = 0; c < d.c; ++c) {
    for (std::int64_t i = 0; i < d.kh; ++i) {
      for (std::int64_t j = 0; j < d.kw; ++j) {
        double* row = col + ((c * d.kh + i) * d.kw + j) * cols;
        for (std::int64_t n = 0; n < d.n; ++n) {
          const double* xc = x + (n * d.c + c) * d.h * d.w;
          double* dst = row + n * p;
          for (std::int64_t oy = 0; oy < d.ho; ++oy) {
            const std::int64_t iy = oy * d.stride - d.padding + i;
            if (iy < 0 || iy >= d.h) {
              std::fill(dst + oy * d.wo, dst + (oy + 1) * d.wo, 0.0);
              continue;
            }
            const double* xr = xc + iy * d.w;
            for (std::int64_t ox = 0; ox < d.wo; ++ox) {
              const std::int64_t ix = ox * d.stride - d.padding + j;
              dst[oy * d.wo + ox] = (ix >= 0 && ix < d.w) ? xr[ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im(const double* col, const ConvDims& d, double* x) {
  const std::int64_t p = d.ho * d.wo;
  const std::int64_t cols = d.n * p;
  std::fill(x, x + d.n * d.c * d.h * d.w, 0.0);
  for (std::int64_t c = 0; c < d.c; ++c) {
    for (std::int64_t i = 0; i < d.kh; ++i) {
      for (std::int64_t j = 0; j < d.kw; ++j) {
        const double* row = col + ((c * d.kh + i) * d.kw + j) * cols;
        for (std::int64_t n = 0; n < d.n; ++n) {
          double* xc = x + (n * d.c + c) * d.h * d.w;
          const double* src = row + n * p;
          for (std::int64_t oy = 0; oy < d.ho; ++oy) {
            const std::int64_t iy = oy * d.stride - d.padding + i;
            if (iy < 0 || iy >= d.h) continue;
            double* xr = xc + iy * d.w;
            for (std::int64_t ox = 0; ox < d.wo; ++ox) {
              const std::int64_t ix = ox * d.stride - d.padding + j;
              if (ix >= 0 && ix < d.w) xr[ix] += src[oy * d.wo + ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t d = std::max(a.size(), b.size());
  const Shape pa = left_pad(a, d), pb = left_pad(b, d);
  Shape out(d);
  for (std::size_t i = 0; i < d; ++i) {
    if (pa[i] == pb[i] || pb[i] == 1) {
      out[i] = pa[i];
    } else if (pa[i] == 1) {
      out[i] = pb[i];
    } else {
      throw InputError(fmt::format("shapes {} and {} are not broadcastable", shape_str(a), shape_str(b)));
    }
  }
  return out;
}

std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  if (in.size() > out.size()) throw InputError("broadcast: input has more axes than output");
  const Shape p = left_pad(in, out.size());
  std::vector<std::int64_t> strides(out.size(), 0);
  std::int64_t s = 1;
  for (int i = static_cast<int>(out.size()) - 1; i >= 0; --i) {
    if (p[i] == out[i]) {
      strides[i] = p[i] == 1 ? 0 : s;
    } else if (p[i] != 1) {
      throw InputError(fmt::format("shape {} does not broadcast to {}", shape_str(in), shape_str(out)));
    }
    s *= p[i];
  }
  return strides;
}

Tensor expand(const Tensor& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  Tensor out(shape);
  const auto sa = broadcast_strides(a.shape(), shape);
  const std::vector<std::int64_t> none(shape.size(), 0);
  const double* pa = a.data().data();
  double* po = out.data().data();
  for_each_broadcast(shape, sa, none, [&](std::int64_t o, std::int64_t ia, std::int64_t) { po[o] = pa[ia]; });
  return out;
}

Tensor sum_to(const Tensor& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  Tensor out(shape);
  const auto st = broadcast_strides(shape, a.shape());
  const std::vector<std::int64_t> none(a.shape().size(), 0);
  const double* pa = a.data().data();
  double* po = out.data().data();
  for_each_broadcast(a.shape(), st, none, [&](std::int64_t i, std::int64_t it, std::int64_t) { po[it] += pa[i]; });
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw InputError("transpose expects a 2-D tensor, got " + shape_str(a.shape()));
  const auto r = a.shape()[0], c = a.shape()[1];
  Tensor out({c, r});
  MapMat(out.data().data(), c, r) = ConstMapMat(a.data().data(), r, c).transpose();
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0]) {
    throw InputError(fmt::format("matmul shape mismatch {} x {}", shape_str(a.shape()), shape_str(b.shape())));
  }
  const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor out({m, n});
  MapMat(out.data().data(), m, n).noalias() = ConstMapMat(a.data().data(), m, k) * ConstMapMat(b.data().data(), k, n);
  return out;
}

ConvDims conv_dims(const Shape& x, const Shape& w, int stride, int padding) {
  if (x.size() != 4 || w.size() != 4) {
    throw InputError(fmt::format("conv2d expects NCHW input and OIHW weight, got {} and {}", shape_str(x), shape_str(w)));
  }
  if (x[1] != w[1]) throw InputError(fmt::format("conv2d channel mismatch: input {} weight {}", shape_str(x), shape_str(w)));
  if (stride < 1 || padding < 0) throw InputError("conv2d: stride must be >= 1 and padding >= 0");
  ConvDims d{x[0], x[1], x[2], x[3], w[0], w[2], w[3], 0, 0, stride, padding};
  d.ho = (d.h + 2 * padding - d.kh) / stride + 1;
  d.wo = (d.w + 2 * padding - d.kw) / stride + 1;
  if (d.ho <= 0 || d.wo <= 0) throw InputError("conv2d: kernel larger than padded input");
  return d;
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
  const ConvDims d = conv_dims(x.shape(), w.shape(), stride, padding);
  const std::int64_t ckk = d.c * d.kh * d.kw, p = d.ho * d.wo;
  ConvDims one = d;
  one.n = 1;
  std::vector<double> col(static_cast<std::size_t>(ckk * p));
  Tensor out({d.n, d.o, d.ho, d.wo});
  const ConstMapMat wm(w.data().data(), d.o, ckk);
  for (std::int64_t n = 0; n < d.n; ++n) {
    im2col(x.data().data() + n * d.c * d.h * d.w, one, col.data());
    MapMat(out.data().data() + n * d.o * p, d.o, p).noalias() = wm * ConstMapMat(col.data(), ckk, p);
  }
  return out;
}

Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, const Shape& input_shape, int stride, int padding) {
  const ConvDims d = conv_dims(input_shape, w.shape(), stride, padding);
  if (g.shape() != Shape{d.n, d.o, d.ho, d.wo}) {
    throw InputError(fmt::format("conv2d_input_grad: gradient shape {} inconsistent", shape_str(g.shape())));
  }
  const std::int64_t ckk = d.c * d.kh * d.kw, p = d.ho * d.wo;
  ConvDims one = d;
  one.n = 1;
  std::vector<double> col(static_cast<std::size_t>(ckk * p));
  Tensor out(input_shape);
  const ConstMapMat wm(w.data().data(), d.o, ckk);
  for (std::int64_t n = 0; n < d.n; ++n) {
    MapMat(col.data(), ckk, p).noalias() = wm.transpose() * ConstMapMat(g.data().data() + n * d.o * p, d.o, p);
    col2im(col.data(), one, out.data().data() + n * d.c * d.h * d.w);
  }
  return out;
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, const Shape& weight_shape, int stride, int padding) {
  const ConvDims d = conv_dims(x.shape(), weight_shape, stride, padding);
  if (g.shape() != Shape{d.n, d.o, d.ho, d.wo}) {
    throw InputError(fmt::format("conv2d_weight_grad: gradient shape {} inconsistent", shape_str(g.shape())));
  }
  const std::int64_t ckk = d.c * d.kh * d.kw, p = d.ho * d.wo;
  ConvDims one = d;
  one.n = 1;
  std::vector<double> col(static_cast<std::size_t>(ckk * p));
  Tensor out(weight_shape);
  MapMat acc(out.data().data(), d.o, ckk);
  for (std::int64_t n = 0; n < d.n; ++n) {
    im2col(x.data().data() + n * d.c * d.h * d.w, one, col.data());
    acc.noalias() += ConstMapMat(g.data().data() + n * d.o * p, d.o, p) * ConstMapMat(col.data(), ckk, p).transpose();
  }
  return out;
}

Tensor softmax_rows(const Tensor& z) {
  if (z.ndim() != 2) throw InputError("softmax_rows expects [N, K], got " + shape_str(z.shape()));
  const auto n = z.shape()[0], k = z.shape()[1];
  Tensor out(z.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    const double* zr = z.data().data() + i * k;
    double* o = out.data().data() + i * k;
    const double m = *std::max_element(zr, zr + k);
    double s = 0.0;
    for (std::int64_t j = 0; j < k; ++j) s += (o[j] = std::exp(zr[j] - m));
    for (std::int64_t j = 0; j < k; ++j) o[j] /= s;
  }
  return out;
}

Tensor logsumexp_rows(const Tensor& z) {
  if (z.ndim() != 2) throw InputError("logsumexp_rows expects [N, K], got " + shape_str(z.shape()));
  const auto n = z.shape()[0], k = z.shape()[1];
  Tensor out({n, 1});
  for (std::int64_t i = 0; i < n; ++i) {
    const double* zr = z.data().data() + i * k;
    const double m = *std::max_element(zr, zr + k);
    double s = 0.0;
    for (std::int64_t j = 0; j < k; ++j) s += std::exp(zr[j] - m);
    out[i] = m + std::log(s);
  }
  return out;
}

}  // namespace art::kernels
