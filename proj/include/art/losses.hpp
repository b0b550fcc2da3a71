#pragma once

// Attribution-alignment losses on input gradients: the soft-margin triplet
// loss and its ablation variants. All terms are differentiable graph values.

#include <span>
#include <string>
#include <vector>

#include "art/autograd.hpp"
#include "art/model.hpp"

namespace art {

enum class LossVariant { art_triplet, eq2_direct, l2_distance, cosine_only, argmin_negative };
std::string to_string(LossVariant v);
LossVariant loss_variant_from_string(const std::string& s);

enum class NegativeRule { argmax, argmin };

/// Class with the largest (argmax) or smallest (argmin) logit other than y;
/// ties go to the lowest index.
int select_negative_class(std::span<const double> logits, int y, NegativeRule rule = NegativeRule::argmax);
std::vector<int> select_negative_classes(const Tensor& logits, std::span<const int> labels, NegativeRule rule);

struct TripletTerms {
  double d_pos = 0;
  double d_neg = 0;
  int i_star = -1;
};

/// Per-sample cosine between the flattened rows of a and b ([N, ...]) as an
/// [N] graph value. Rows where either norm is below 1e-12 yield a constant
/// 0 and are flagged in `degenerate`.
ag::Var batch_cosine(const ag::Var& a, const ag::Var& b, bool channel_mean, std::vector<bool>* degenerate = nullptr);

/// Per-sample l2 norm of rows of a, [N]; exact zero (and zero gradient) at 0.
ag::Var batch_norm(const ag::Var& a);

struct AttrLossResult {
  ag::Var loss;  // 0-d, mean over non-degenerate samples
  std::vector<TripletTerms> terms;
  std::vector<bool> degenerate;
};

/// log(1 + exp(-(d(g_neg, x) - d(g_pos, x)))) with d = 1 - cosine, averaged
/// over the batch. Degenerate samples contribute cosine 0 (a warning is
/// logged) and are marked so callers can drop them from statistics.
AttrLossResult attr_triplet_loss(const ag::Var& x, const ag::Var& g_pos, const ag::Var& g_neg, bool channel_mean);

/// Scalar helper on plain tensors (single sample), mainly for inspection.
double attr_triplet_value(double d_pos, double d_neg);

struct AttrLossInputs {
  ag::Var x_adv;  // [N, C, H, W], requires grad for ascent
  std::vector<int> labels;
  std::vector<int> negatives;  // i*, chosen on clean logits
  ag::Var x_clean;             // needed by eq2_direct
};

/// The attribution term for a variant, built with double-backward-capable
/// input gradients in `mode` (softplus). create_graph keeps the result
/// differentiable in x_adv and the parameters.
AttrLossResult attribution_loss(const ModelBundle& model, const AttrLossInputs& in, LossVariant variant, bool channel_mean,
                                ActivationMode mode);

}  // namespace art
