#include "art/losses.hpp"

#include <cmath>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "art/errors.hpp"

namespace art {

std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::art_triplet: return "art_triplet";
    case LossVariant::eq2_direct: return "eq2_direct";
    case LossVariant::l2_distance: return "l2_distance";
    case LossVariant::cosine_only: return "cosine_only";
    case LossVariant::argmin_negative: return "argmin_negative";
  }
  return "?";
}

LossVariant loss_variant_from_string(const std::string& s) {
  for (auto v : {LossVariant::art_triplet, LossVariant::eq2_direct, LossVariant::l2_distance, LossVariant::cosine_only,
                 LossVariant::argmin_negative}) {
    if (to_string(v) == s) return v;
  }
  throw InputError(fmt::format(
      "unknown loss variant '{}' (art_triplet, eq2_direct, l2_distance, cosine_only, argmin_negative)", s));
}

int select_negative_class(std::span<const double> logits, int y, NegativeRule rule) {
  const auto k = static_cast<int>(logits.size());
  if (k < 2) throw InputError("negative class selection needs at least two classes");
  if (y < 0 || y >= k) throw InputError(fmt::format("label {} out of range [0, {})", y, k));
  int best = -1;
  for (int i = 0; i < k; ++i) {
    if (i == y) continue;
    if (best < 0) {
      best = i;
      continue;
    }
    const double v = logits[static_cast<std::size_t>(i)], b = logits[static_cast<std::size_t>(best)];
    if (rule == NegativeRule::argmax ? v > b : v < b) best = i;
  }
  return best;
}

std::vector<int> select_negative_classes(const Tensor& logits, std::span<const int> labels, NegativeRule rule) {
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    out[static_cast<std::size_t>(i)] = select_negative_class(logits.data().subspan(i * k, k), labels[static_cast<std::size_t>(i)], rule);
  }
  return out;
}

namespace {

ag::Var rows(const ag::Var& a, bool channel_mean) {
  const Shape& s = a.shape();
  if (!channel_mean) return a;
  if (s.size() != 4) throw InputError("channel_mean needs [N, C, H, W], got " + shape_str(s));
  return ag::scale(ag::sum_to(a, {s[0], 1, s[2], s[3]}), 1.0 / static_cast<double>(s[1]));
}

ag::Var row_sum(const ag::Var& a) {
  const std::int64_t n = a.shape()[0];
  return ag::reshape(ag::sum_to(ag::reshape(a, {n, a.numel() / n}), {n, 1}), {n});
}

}  // namespace

ag::Var batch_norm(const ag::Var& a) {
  const ag::Var sq = row_sum(ag::square(a));
  const std::int64_t n = sq.numel();
  Tensor mask({n}), fill({n});
  for (std::int64_t i = 0; i < n; ++i) {
    mask[i] = sq.value()[i] > 0 ? 1.0 : 0.0;
    fill[i] = 1.0 - mask[i];
  }
  const ag::Var m(mask);
  return ag::mul(ag::sqrt(ag::add(ag::mul(sq, m), ag::Var(fill))), m);
}

ag::Var batch_cosine(const ag::Var& a, const ag::Var& b, bool channel_mean, std::vector<bool>* degenerate) {
  if (a.shape() != b.shape()) throw InputError(fmt::format("cosine shape mismatch {} vs {}", shape_str(a.shape()), shape_str(b.shape())));
  const ag::Var ra = rows(a, channel_mean), rb = rows(b, channel_mean);
  const ag::Var na = ag::sqrt(row_sum(ag::square(ra))), nb = ag::sqrt(row_sum(ag::square(rb)));
  const std::int64_t n = na.numel();
  Tensor mask({n}), fill({n});
  if (degenerate) degenerate->assign(static_cast<std::size_t>(n), false);
  for (std::int64_t i = 0; i < n; ++i) {
    const bool bad = na.value()[i] < 1e-12 || nb.value()[i] < 1e-12;
    mask[i] = bad ? 0.0 : 1.0;
    fill[i] = bad ? 1.0 : 0.0;
    if (degenerate) (*degenerate)[static_cast<std::size_t>(i)] = bad;
  }
  const ag::Var m(mask);
  // degenerate rows: numerator masked to 0, denominator replaced by 1
  const ag::Var denom = ag::add(ag::mul(ag::mul(na, nb), m), ag::Var(fill));
  return ag::div(ag::mul(row_sum(ag::mul(ra, rb)), m), denom);
}

double attr_triplet_value(double d_pos, double d_neg) {
  const double z = d_pos - d_neg;
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

namespace {

AttrLossResult mean_over_valid(const ag::Var& per_sample, std::vector<bool> degenerate, std::vector<TripletTerms> terms) {
  const std::int64_t n = per_sample.numel();
  std::int64_t valid = 0;
  Tensor w({n});
  for (std::int64_t i = 0; i < n; ++i) {
    if (!degenerate[static_cast<std::size_t>(i)]) {
      w[i] = 1.0;
      ++valid;
    }
  }
  if (valid < n) spdlog::warn("{} of {} samples have a zero-norm gradient or input; cosine set to 0", n - valid, n);
  if (valid == 0) {
    for (auto& v : w.data()) v = 1.0;
    valid = n;
  }
  ag::Var loss = ag::scale(ag::sum(ag::mul(per_sample, ag::Var(w))), 1.0 / static_cast<double>(valid));
  return {loss, std::move(terms), std::move(degenerate)};
}

}  // namespace

AttrLossResult attr_triplet_loss(const ag::Var& x, const ag::Var& g_pos, const ag::Var& g_neg, bool channel_mean) {
  std::vector<bool> deg_pos, deg_neg;
  const ag::Var d_pos = ag::sub(ag::Var(Tensor(Shape{x.shape()[0]}, 1.0)), batch_cosine(g_pos, x, channel_mean, &deg_pos));
  const ag::Var d_neg = ag::sub(ag::Var(Tensor(Shape{x.shape()[0]}, 1.0)), batch_cosine(g_neg, x, channel_mean, &deg_neg));
  // softplus with beta = 1 is log(1 + exp(.)) evaluated stably
  const ag::Var per_sample = ag::softplus(ag::sub(d_pos, d_neg), 1.0);
  const std::int64_t n = per_sample.numel();
  std::vector<bool> degenerate(static_cast<std::size_t>(n));
  std::vector<TripletTerms> terms(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const auto u = static_cast<std::size_t>(i);
    degenerate[u] = deg_pos[u] || deg_neg[u];
    terms[u] = {d_pos.value()[i], d_neg.value()[i], -1};
  }
  return mean_over_valid(per_sample, std::move(degenerate), std::move(terms));
}

AttrLossResult attribution_loss(const ModelBundle& model, const AttrLossInputs& in, LossVariant variant, bool channel_mean,
                                ActivationMode mode) {
  const ag::Var& x = in.x_adv;
  const std::int64_t n = x.shape()[0];
  ag::GradModeGuard on(true);
  ag::Var xg = x.requires_grad() ? x : ag::Var(x.value(), true);
  const ag::Var g_pos = input_gradient(model, xg, in.labels, mode, true);
  switch (variant) {
    case LossVariant::art_triplet:
    case LossVariant::argmin_negative: {
      const ag::Var g_neg = input_gradient(model, xg, in.negatives, mode, true);
      AttrLossResult r = attr_triplet_loss(xg, g_pos, g_neg, channel_mean);
      for (std::int64_t i = 0; i < n; ++i) r.terms[static_cast<std::size_t>(i)].i_star = in.negatives[static_cast<std::size_t>(i)];
      return r;
    }
    case LossVariant::cosine_only: {
      std::vector<bool> deg;
      const ag::Var d_pos = ag::sub(ag::Var(Tensor(Shape{n}, 1.0)), batch_cosine(g_pos, xg, channel_mean, &deg));
      std::vector<TripletTerms> terms(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) terms[static_cast<std::size_t>(i)].d_pos = d_pos.value()[i];
      return mean_over_valid(d_pos, std::move(deg), std::move(terms));
    }
    case LossVariant::l2_distance: {
      const ag::Var dist = batch_norm(ag::sub(g_pos, xg));
      return mean_over_valid(dist, std::vector<bool>(static_cast<std::size_t>(n), false), std::vector<TripletTerms>(static_cast<std::size_t>(n)));
    }
    case LossVariant::eq2_direct: {
      if (!in.x_clean.defined()) throw InputError("eq2_direct needs the clean input");
      ag::Var xc(in.x_clean.value(), true);
      const ag::Var g_clean = input_gradient(model, xc, in.labels, mode, true);
      const ag::Var dist = batch_norm(ag::sub(g_pos, g_clean));
      return mean_over_valid(dist, std::vector<bool>(static_cast<std::size_t>(n), false), std::vector<TripletTerms>(static_cast<std::size_t>(n)));
    }
  }
  throw InputError("unhandled loss variant");
}

}  // namespace art
