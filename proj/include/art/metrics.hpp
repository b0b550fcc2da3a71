#pragma once

// Similarity between attribution maps and alignment between inputs and
// gradients.

#include <cstdint>
#include <span>
#include <vector>

#include "art/tensor.hpp"

namespace art {

/// Indices of the k largest values, descending; ties go to the lower index.
std::vector<std::int64_t> topk_indices(std::span<const double> scores, std::int64_t k);

/// |topk(a) ∩ topk(b)| / k.
double topk_intersection(std::span<const double> a, std::span<const double> b, std::int64_t k);

/// Tau-b with tie correction, O(n log n). Throws DegenerateInputError when
/// n < 2 or either side is entirely tied.
double kendall_tau(std::span<const double> a, std::span<const double> b);

/// Cosine of the flattened tensors. With channel_mean, both are first averaged
/// over the channel axis of a [C,H,W] or [N,C,H,W] layout.
double cosine_alignment(const Tensor& x, const Tensor& g, bool channel_mean = false);

/// Mean over the channel axis: [C,H,W] -> [H,W], [N,C,H,W] -> [N,H,W].
Tensor channel_mean(const Tensor& t);

/// Elementwise |t|.
Tensor abs_scores(const Tensor& t);

struct SimilarityScore {
  double topk_intersection = 0;
  double kendall_tau = 0;
  std::int64_t k = 0;
};

/// Both measures on |a| and |b|.
SimilarityScore compare_attributions(const Tensor& a, const Tensor& b, std::int64_t k);

}  // namespace art
