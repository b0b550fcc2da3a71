#include "art/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <numeric>

#include "art/errors.hpp"

namespace art {

std::vector<std::int64_t> topk_indices(std::span<const double> scores, std::int64_t k) {
  const auto n = static_cast<std::int64_t>(scores.size());
  if (k < 0 || k > n) throw InputError(fmt::format("k={} outside [0, {}]", k, n));
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](std::int64_t i, std::int64_t j) {
    const double a = scores[static_cast<std::size_t>(i)], b = scores[static_cast<std::size_t>(j)];
    return a > b || (a == b && i < j);
  });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

double topk_intersection(std::span<const double> a, std::span<const double> b, std::int64_t k) {
  if (a.size() != b.size()) throw InputError(fmt::format("length mismatch {} vs {}", a.size(), b.size()));
  if (k < 1) throw InputError("k must be positive");
  auto ia = topk_indices(a, k), ib = topk_indices(b, k);
  std::sort(ia.begin(), ia.end());
  std::sort(ib.begin(), ib.end());
  std::vector<std::int64_t> common;
  std::set_intersection(ia.begin(), ia.end(), ib.begin(), ib.end(), std::back_inserter(common));
  return static_cast<double>(common.size()) / static_cast<double>(k);
}

namespace {

// Pairs tied within consecutive runs of equal keys.
template <class Eq>
std::int64_t tied_pairs(std::size_t n, Eq eq) {
  std::int64_t total = 0, run = 1;
  for (std::size_t i = 1; i < n; ++i) {
    if (eq(i - 1, i)) {
      ++run;
    } else {
      total += run * (run - 1) / 2;
      run = 1;
    }
  }
  return total + run * (run - 1) / 2;
}

// Counts inversions of v while merge-sorting it.
std::int64_t count_swaps(std::vector<double>& v, std::vector<double>& buf, std::size_t lo, std::size_t hi) {
  if (hi - lo < 2) return 0;
  const std::size_t mid = lo + (hi - lo) / 2;
  std::int64_t swaps = count_swaps(v, buf, lo, mid) + count_swaps(v, buf, mid, hi);
  std::size_t i = lo, j = mid, o = lo;
  while (i < mid && j < hi) {
    if (v[j] < v[i]) {
      swaps += static_cast<std::int64_t>(mid - i);
      buf[o++] = v[j++];
    } else {
      buf[o++] = v[i++];
    }
  }
  while (i < mid) buf[o++] = v[i++];
  while (j < hi) buf[o++] = v[j++];
  std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo), buf.begin() + static_cast<std::ptrdiff_t>(hi),
            v.begin() + static_cast<std::ptrdiff_t>(lo));
  return swaps;
}

}  // namespace

double kendall_tau(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InputError(fmt::format("length mismatch {} vs {}", a.size(), b.size()));
  const std::size_t n = a.size();
  if (n < 2) throw DegenerateInputError("kendall_tau needs at least two elements");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return a[i] < a[j] || (a[i] == a[j] && b[i] < b[j]);
  });
  const auto total = static_cast<std::int64_t>(n * (n - 1) / 2);
  const std::int64_t ties_a = tied_pairs(n, [&](std::size_t i, std::size_t j) { return a[order[i]] == a[order[j]]; });
  const std::int64_t ties_ab = tied_pairs(
      n, [&](std::size_t i, std::size_t j) { return a[order[i]] == a[order[j]] && b[order[i]] == b[order[j]]; });
  std::vector<double> bs(n), buf(n);
  for (std::size_t i = 0; i < n; ++i) bs[i] = b[order[i]];
  const std::int64_t discordant = count_swaps(bs, buf, 0, n);
  const std::int64_t ties_b = tied_pairs(n, [&](std::size_t i, std::size_t j) { return bs[i] == bs[j]; });
  if (ties_a == total || ties_b == total) throw DegenerateInputError("kendall_tau undefined: an input is constant");
  // concordant - discordant over pairs untied in both
  const std::int64_t untied = total - ties_a - ties_b + ties_ab;
  const std::int64_t concordant = untied - discordant;
  const double denom = std::sqrt(static_cast<double>(total - ties_a)) * std::sqrt(static_cast<double>(total - ties_b));
  return static_cast<double>(concordant - discordant) / denom;
}

Tensor channel_mean(const Tensor& t) {
  if (t.ndim() != 3 && t.ndim() != 4) throw InputError("channel_mean expects [C,H,W] or [N,C,H,W], got " + shape_str(t.shape()));
  const bool batched = t.ndim() == 4;
  const std::int64_t n = batched ? t.dim(0) : 1, c = t.dim(-3), hw = t.dim(-2) * t.dim(-1);
  Tensor out(batched ? Shape{n, t.dim(2), t.dim(3)} : Shape{t.dim(1), t.dim(2)});
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t p = 0; p < hw; ++p) out[s * hw + p] += t[(s * c + ch) * hw + p] / static_cast<double>(c);
  return out;
}

Tensor abs_scores(const Tensor& t) {
  Tensor out = t;
  for (auto& v : out.data()) v = std::abs(v);
  return out;
}

double cosine_alignment(const Tensor& x, const Tensor& g, bool reduce_channels) {
  if (x.numel() != g.numel()) throw InputError(fmt::format("size mismatch {} vs {}", shape_str(x.shape()), shape_str(g.shape())));
  if (reduce_channels) return cosine_alignment(channel_mean(x), channel_mean(g), false);
  const double nx = l2_norm(x), ng = l2_norm(g);
  if (nx < 1e-12 || ng < 1e-12) throw DegenerateInputError("cosine undefined for a (near-)zero vector");
  return std::clamp(dot(x, g) / (nx * ng), -1.0, 1.0);
}

SimilarityScore compare_attributions(const Tensor& a, const Tensor& b, std::int64_t k) {
  const Tensor aa = abs_scores(a), ab = abs_scores(b);
  return {topk_intersection(aa.data(), ab.data(), k), kendall_tau(aa.data(), ab.data()), k};
}

}  // namespace art
