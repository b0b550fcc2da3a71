#include "art/attacks.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fmt/format.h>
#include <limits>

#include "art/errors.hpp"
#include "art/metrics.hpp"

namespace art {

std::string to_string(Norm n) { return n == Norm::linf ? "linf" : "l2"; }

Norm norm_from_string(const std::string& s) {
  if (s == "linf") return Norm::linf;
  if (s == "l2") return Norm::l2;
  throw InputError(fmt::format("unknown norm '{}' (linf, l2)", s));
}

namespace {

std::atomic<bool>& debug_flag() {
  static std::atomic<bool> flag{std::getenv("ART_DEBUG_ATTACKS") != nullptr};
  return flag;
}

constexpr std::int64_t kChunk = 64;

struct Layout {
  std::int64_t n;
  std::int64_t d;
  Shape batch;
};

Layout layout(const ModelBundle& model, const Tensor& x) {
  const Shape bs = model.batch_shape(x.shape());
  return {bs[0], shape_numel(bs) / bs[0], bs};
}

std::span<double> row(Tensor& t, std::int64_t i, std::int64_t d) { return t.data().subspan(static_cast<std::size_t>(i * d), static_cast<std::size_t>(d)); }
std::span<const double> row(const Tensor& t, std::int64_t i, std::int64_t d) {
  return t.data().subspan(static_cast<std::size_t>(i * d), static_cast<std::size_t>(d));
}

void check_labels(const Layout& l, std::span<const int> y, int k) {
  if (static_cast<std::int64_t>(y.size()) != l.n) throw InputError(fmt::format("{} labels for {} inputs", y.size(), l.n));
  for (int c : y) {
    if (c < 0 || c >= k) throw InputError(fmt::format("label {} out of range [0, {})", c, k));
  }
}

// Ascent direction scaled by the per-sample step: sign for linf, unit l2 otherwise.
void ascend(Tensor& xa, const Tensor& g, std::span<const double> step, const Layout& l, Norm norm) {
  for (std::int64_t i = 0; i < l.n; ++i) {
    auto xr = row(xa, i, l.d);
    const auto gr = row(g, i, l.d);
    const double a = step[static_cast<std::size_t>(i)];
    if (norm == Norm::linf) {
      for (std::int64_t j = 0; j < l.d; ++j) xr[j] += a * ((gr[j] > 0) - (gr[j] < 0));
    } else {
      double s = 0;
      for (double v : gr) s += v * v;
      if (s <= 0) continue;
      const double inv = a / std::sqrt(s);
      for (std::int64_t j = 0; j < l.d; ++j) xr[j] += inv * gr[j];
    }
  }
}

std::vector<double> uniform_steps(std::int64_t n, double a) { return std::vector<double>(static_cast<std::size_t>(n), a); }

}  // namespace

void set_attack_debug_checks(bool on) { debug_flag() = on; }
bool attack_debug_checks() { return debug_flag(); }

Tensor project(const Tensor& x_adv, const Tensor& x, const PerturbationBudget& b) {
  if (x_adv.shape() != x.shape()) throw InputError("project: shape mismatch");
  Tensor out = x_adv;
  const std::int64_t n = x.ndim() == 4 ? x.dim(0) : 1, d = x.numel() / n;
  for (std::int64_t i = 0; i < n; ++i) {
    auto o = row(out, i, d);
    const auto xr = row(x, i, d);
    if (b.norm == Norm::linf) {
      for (std::int64_t j = 0; j < d; ++j) o[j] = std::clamp(o[j], xr[j] - b.epsilon, xr[j] + b.epsilon);
    } else {
      double s = 0;
      for (std::int64_t j = 0; j < d; ++j) s += (o[j] - xr[j]) * (o[j] - xr[j]);
      const double norm = std::sqrt(s);
      if (norm > b.epsilon) {
        const double f = b.epsilon / norm;
        for (std::int64_t j = 0; j < d; ++j) o[j] = xr[j] + (o[j] - xr[j]) * f;
      }
    }
    for (auto& v : o) v = std::clamp(v, b.lower, b.upper);
  }
  return out;
}

double max_perturbation(const Tensor& x_adv, const Tensor& x, Norm norm) {
  const std::int64_t n = x.ndim() == 4 ? x.dim(0) : 1, d = x.numel() / n;
  double worst = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto a = row(x_adv, i, d), b = row(x, i, d);
    double acc = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double diff = std::abs(a[j] - b[j]);
      acc = norm == Norm::linf ? std::max(acc, diff) : acc + diff * diff;
    }
    worst = std::max(worst, norm == Norm::linf ? acc : std::sqrt(acc));
  }
  return worst;
}

void check_budget(const Tensor& x_adv, const Tensor& x, const PerturbationBudget& b) {
  const double m = max_perturbation(x_adv, x, b.norm);
  if (m > b.epsilon + 1e-7) throw std::logic_error(fmt::format("budget violated: {} norm {} > eps {}", to_string(b.norm), m, b.epsilon));
  for (double v : x_adv.data()) {
    if (!(v >= b.lower && v <= b.upper)) throw std::logic_error(fmt::format("value {} outside [{}, {}]", v, b.lower, b.upper));
  }
}

Tensor random_start(const Tensor& x, const PerturbationBudget& b, std::mt19937_64& rng) {
  Tensor out = x;
  std::uniform_real_distribution<double> u(-b.epsilon, b.epsilon);
  if (b.norm == Norm::linf) {
    for (auto& v : out.data()) v += u(rng);
  } else {
    const std::int64_t n = x.ndim() == 4 ? x.dim(0) : 1, d = x.numel() / n;
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> r01(0.0, 1.0);
    for (std::int64_t i = 0; i < n; ++i) {
      std::vector<double> dir(static_cast<std::size_t>(d));
      double s = 0;
      for (auto& v : dir) {
        v = nd(rng);
        s += v * v;
      }
      const double radius = b.epsilon * r01(rng) / std::sqrt(s);
      auto o = row(out, i, d);
      for (std::int64_t j = 0; j < d; ++j) o[j] += radius * dir[static_cast<std::size_t>(j)];
    }
  }
  return project(out, x, b);
}

AttackResult pgd_attack(const ModelBundle& model, const Tensor& x, std::span<const int> y, const PerturbationBudget& b,
                        std::uint64_t seed) {
  const Layout l = layout(model, x);
  check_labels(l, y, model.num_classes());
  const Tensor x4 = x.reshaped(l.batch);
  std::mt19937_64 rng(seed);
  AttackResult res;
  res.objective_trace.assign(static_cast<std::size_t>(b.steps), 0.0);
  std::vector<Tensor> parts;
  for (std::int64_t s = 0; s < l.n; s += kChunk) {
    const std::int64_t e = std::min(l.n, s + kChunk);
    const Tensor xc = x4.slice_rows(s, e);
    const auto yc = y.subspan(static_cast<std::size_t>(s), static_cast<std::size_t>(e - s));
    const Layout lc{e - s, l.d, xc.shape()};
    Tensor xa = b.random_init ? random_start(xc, b, rng) : xc;
    const auto steps = uniform_steps(lc.n, b.step_size);
    for (int t = 0; t < b.steps; ++t) {
      ag::Var xv(xa, true);
      const ag::Var z = model.forward(xv, ActivationMode::relu());
      const ag::Var loss = ag::sub(ag::sum(ag::logsumexp_rows(z)), select_logits(z, yc));
      const ag::Var ins[] = {xv};
      const Tensor g = ag::grad(loss, ins)[0].value();
      res.objective_trace[static_cast<std::size_t>(t)] += loss.item() / static_cast<double>(l.n);
      ascend(xa, g, steps, lc, b.norm);
      xa = project(xa, xc, b);
      if (attack_debug_checks()) check_budget(xa, xc, b);
    }
    parts.push_back(std::move(xa));
  }
  res.perturbed = concat_rows(parts).reshaped(x.shape());
  res.steps_taken = b.steps;
  const auto before = predict(model, x4), after = predict(model, res.perturbed.reshaped(l.batch));
  for (std::size_t i = 0; i < before.size(); ++i) res.preserved.push_back(before[i] == after[i]);
  res.prediction_preserved = std::all_of(res.preserved.begin(), res.preserved.end(), [](bool v) { return v; });
  res.skipped.assign(before.size(), false);
  return res;
}

Tensor spsa_gradient(const ModelBundle& model, const Tensor& x, int y, const SpsaConfig& cfg, std::mt19937_64& rng) {
  const Layout l = layout(model, x);
  if (l.n != 1) throw InputError("spsa_gradient expects a single input");
  if (cfg.batch_perturbations < 2) throw InputError("spsa needs at least two evaluations per estimate");
  const std::int64_t pairs = cfg.batch_perturbations / 2, d = l.d;
  Tensor probes({2 * pairs, l.batch[1], l.batch[2], l.batch[3]});
  std::vector<std::vector<double>> dirs(static_cast<std::size_t>(pairs), std::vector<double>(static_cast<std::size_t>(d)));
  std::bernoulli_distribution coin(0.5);
  for (std::int64_t p = 0; p < pairs; ++p) {
    auto& v = dirs[static_cast<std::size_t>(p)];
    for (auto& e : v) e = coin(rng) ? 1.0 : -1.0;
    for (std::int64_t j = 0; j < d; ++j) {
      probes[(2 * p) * d + j] = x[j] + cfg.delta * v[static_cast<std::size_t>(j)];
      probes[(2 * p + 1) * d + j] = x[j] - cfg.delta * v[static_cast<std::size_t>(j)];
    }
  }
  const Tensor z = logits(model, probes, ActivationMode::relu());
  const std::int64_t k = model.num_classes();
  auto ce = [&](std::int64_t r) {
    const auto zr = z.data().subspan(static_cast<std::size_t>(r * k), static_cast<std::size_t>(k));
    const double m = *std::max_element(zr.begin(), zr.end());
    double s = 0;
    for (double v : zr) s += std::exp(v - m);
    return m + std::log(s) - zr[static_cast<std::size_t>(y)];
  };
  Tensor g(x.shape());
  for (std::int64_t p = 0; p < pairs; ++p) {
    const double coef = (ce(2 * p) - ce(2 * p + 1)) / (2 * cfg.delta * static_cast<double>(pairs));
    const auto& v = dirs[static_cast<std::size_t>(p)];
    for (std::int64_t j = 0; j < d; ++j) g[j] += coef * v[static_cast<std::size_t>(j)];
  }
  return g;
}

AttackResult spsa_attack(const ModelBundle& model, const Tensor& x, std::span<const int> y, const PerturbationBudget& b,
                         const SpsaConfig& cfg, std::uint64_t seed) {
  const Layout l = layout(model, x);
  check_labels(l, y, model.num_classes());
  const Tensor x4 = x.reshaped(l.batch);
  std::mt19937_64 rng(seed);
  Tensor xa = b.random_init ? random_start(x4, b, rng) : x4;
  const Shape item{1, l.batch[1], l.batch[2], l.batch[3]};
  const auto steps = uniform_steps(1, b.step_size);
  AttackResult res;
  for (int t = 0; t < b.steps; ++t) {
    for (std::int64_t i = 0; i < l.n; ++i) {
      Tensor xi = xa.slice_rows(i, i + 1);
      const Tensor g = spsa_gradient(model, xi, y[static_cast<std::size_t>(i)], cfg, rng);
      ascend(xi, g, steps, {1, l.d, item}, b.norm);
      xi = project(xi, x4.slice_rows(i, i + 1), b);
      std::copy(xi.data().begin(), xi.data().end(), row(xa, i, l.d).begin());
    }
    if (attack_debug_checks()) check_budget(xa, x4, b);
  }
  res.perturbed = xa.reshaped(x.shape());
  res.steps_taken = b.steps;
  const auto before = predict(model, x4), after = predict(model, xa);
  for (std::size_t i = 0; i < before.size(); ++i) res.preserved.push_back(before[i] == after[i]);
  res.prediction_preserved = std::all_of(res.preserved.begin(), res.preserved.end(), [](bool v) { return v; });
  res.skipped.assign(before.size(), false);
  return res;
}

double accuracy(const ModelBundle& model, const Tensor& x, std::span<const int> y) {
  const Layout l = layout(model, x);
  check_labels(l, y, model.num_classes());
  if (l.n == 0) throw InputError("accuracy of an empty set");
  const Tensor x4 = x.reshaped(l.batch);
  std::int64_t correct = 0;
  for (std::int64_t s = 0; s < l.n; s += 256) {
    const std::int64_t e = std::min(l.n, s + 256);
    const auto p = predict(model, x4.slice_rows(s, e));
    for (std::int64_t i = s; i < e; ++i) correct += p[static_cast<std::size_t>(i - s)] == y[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(correct) / static_cast<double>(l.n);
}

double transfer_attack_eval(const ModelBundle& source, const ModelBundle& target, const Tensor& x, std::span<const int> y,
                            const PerturbationBudget& b, std::uint64_t seed) {
  if (source.input_shape() != target.input_shape()) throw InputError("transfer: models have different input shapes");
  const AttackResult r = pgd_attack(source, x, y, b, seed);
  return accuracy(target, r.perturbed, y);
}

PerturbationBudget ifia_default_budget() { return {Norm::linf, 8.0 / 255.0, 1.0 / 255.0, 50, false, 0.0, 1.0}; }

namespace {

// Shared loop of the attribution attacks. masks: [n, d] indicator of the
// index set; normalized selects share-of-mass (targeted) over raw negative
// mass (untargeted).
AttackResult attribution_attack(const ModelBundle& model, const Tensor& x, std::span<const int> y,
                                const PerturbationBudget& b, const AttributionAttackConfig& cfg, bool targeted,
                                const Tensor* targets) {
  const Layout l = layout(model, x);
  check_labels(l, y, model.num_classes());
  if (cfg.k < 1 || cfg.k > l.d) throw InputError(fmt::format("k={} outside [1, {}]", cfg.k, l.d));
  const Tensor x4 = x.reshaped(l.batch);
  const auto clean_pred = predict(model, x4);
  std::mt19937_64 rng(0x5eed);

  AttackResult res;
  res.perturbed = x4;
  res.preserved.assign(static_cast<std::size_t>(l.n), true);
  res.skipped.assign(static_cast<std::size_t>(l.n), false);
  res.reverted_steps.assign(static_cast<std::size_t>(l.n), 0);
  res.objective_trace.assign(static_cast<std::size_t>(b.steps) + 1, 0.0);
  std::int64_t attacked = 0;

  std::vector<std::int64_t> active;
  for (std::int64_t i = 0; i < l.n; ++i) {
    if (clean_pred[static_cast<std::size_t>(i)] != y[static_cast<std::size_t>(i)]) {
      res.skipped[static_cast<std::size_t>(i)] = true;
    } else {
      active.push_back(i);
    }
  }

  for (std::size_t s = 0; s < active.size(); s += static_cast<std::size_t>(cfg.chunk)) {
    const std::size_t e = std::min(active.size(), s + static_cast<std::size_t>(cfg.chunk));
    const std::vector<std::int64_t> idx(active.begin() + static_cast<std::ptrdiff_t>(s), active.begin() + static_cast<std::ptrdiff_t>(e));
    const auto n = static_cast<std::int64_t>(idx.size());
    const Tensor xc = x4.gather_rows(idx);
    std::vector<int> yc;
    for (auto i : idx) yc.push_back(y[static_cast<std::size_t>(i)]);
    const Layout lc{n, l.d, xc.shape()};

    Tensor reference;
    if (targeted) {
      reference = targets->reshaped({l.n, l.d}).gather_rows(idx);
    } else {
      reference = attribution_graph(model, ag::Var(xc), yc, cfg.evaluation, cfg.eval_mode, false).value().reshaped({n, l.d});
    }
    Tensor mask({n, l.d});
    for (std::int64_t i = 0; i < n; ++i) {
      const Tensor ref_abs = abs_scores(Tensor({l.d}, std::vector<double>(row(reference, i, l.d).begin(), row(reference, i, l.d).end())));
      for (auto j : topk_indices(ref_abs.data(), cfg.k)) mask[i * l.d + j] = 1.0;
    }
    const ag::Var mask_v(mask.reshaped(xc.shape()));

    Tensor xa = b.random_init ? random_start(xc, b, rng) : xc;
    if (b.random_init) {
      // a random start that already flips the label falls back to the clean input
      const auto p = predict(model, xa);
      for (std::int64_t i = 0; i < n; ++i) {
        if (p[static_cast<std::size_t>(i)] != yc[static_cast<std::size_t>(i)]) {
          std::copy(row(xc, i, l.d).begin(), row(xc, i, l.d).end(), row(xa, i, l.d).begin());
        }
      }
    }
    Tensor best = xa;
    std::vector<double> best_obj(static_cast<std::size_t>(n), -std::numeric_limits<double>::infinity());
    std::vector<double> step(static_cast<std::size_t>(n), b.step_size);

    for (int t = 0; t <= b.steps; ++t) {
      const bool last = t == b.steps;
      ag::Var xv(xa, !last);
      const ag::Var a = ag::abs(attribution_graph(model, xv, yc, cfg.attribution, cfg.attack_mode, !last));
      ag::Var per = ag::reshape(ag::sum_to(ag::reshape(ag::mul(a, mask_v), {n, l.d}), {n, 1}), {n});
      if (targeted) {
        const ag::Var total = ag::reshape(ag::sum_to(ag::reshape(a, {n, l.d}), {n, 1}), {n});
        per = ag::div(per, ag::shift(total, 1e-12));
      } else {
        per = ag::neg(per);
      }
      for (std::int64_t i = 0; i < n; ++i) {
        const double v = per.value()[i];
        res.objective_trace[static_cast<std::size_t>(t)] += v;
        if (v > best_obj[static_cast<std::size_t>(i)]) {
          best_obj[static_cast<std::size_t>(i)] = v;
          std::copy(row(xa, i, l.d).begin(), row(xa, i, l.d).end(), row(best, i, l.d).begin());
        }
      }
      if (last) break;
      const ag::Var ins[] = {xv};
      const Tensor g = ag::grad(ag::sum(per), ins)[0].value();
      Tensor xn = xa;
      ascend(xn, g, step, lc, b.norm);
      xn = project(xn, xc, b);
      if (attack_debug_checks()) check_budget(xn, xc, b);
      const auto p = predict(model, xn);
      for (std::int64_t i = 0; i < n; ++i) {
        if (p[static_cast<std::size_t>(i)] != yc[static_cast<std::size_t>(i)]) {
          // revert; retry from the same point with half the step
          ++res.reverted_steps[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
          step[static_cast<std::size_t>(i)] *= 0.5;
        } else {
          std::copy(row(xn, i, l.d).begin(), row(xn, i, l.d).end(), row(xa, i, l.d).begin());
        }
      }
    }
    for (std::int64_t i = 0; i < n; ++i) {
      std::copy(row(best, i, l.d).begin(), row(best, i, l.d).end(), row(res.perturbed, idx[static_cast<std::size_t>(i)], l.d).begin());
    }
    attacked += n;
  }
  if (attacked > 0) {
    for (auto& v : res.objective_trace) v /= static_cast<double>(attacked);
  }
  const auto after = predict(model, res.perturbed);
  for (std::int64_t i = 0; i < l.n; ++i) {
    res.preserved[static_cast<std::size_t>(i)] = after[static_cast<std::size_t>(i)] == clean_pred[static_cast<std::size_t>(i)];
  }
  res.prediction_preserved = std::all_of(res.preserved.begin(), res.preserved.end(), [](bool v) { return v; });
  res.perturbed = res.perturbed.reshaped(x.shape());
  res.steps_taken = b.steps;
  return res;
}

}  // namespace

AttackResult ifia_topk_attack(const ModelBundle& model, const Tensor& x, std::span<const int> y, const PerturbationBudget& b,
                              const AttributionAttackConfig& cfg) {
  return attribution_attack(model, x, y, b, cfg, false, nullptr);
}

AttackResult targeted_attribution_attack(const ModelBundle& model, const Tensor& x, std::span<const int> y,
                                         const Tensor& target_maps, const PerturbationBudget& b,
                                         const AttributionAttackConfig& cfg) {
  if (target_maps.numel() != x.numel()) {
    throw InputError(fmt::format("target maps {} do not match inputs {}", shape_str(target_maps.shape()), shape_str(x.shape())));
  }
  return attribution_attack(model, x, y, b, cfg, true, &target_maps);
}

InnerMaxResult art_inner_maximization(const ModelBundle& model, const Tensor& x, std::span<const int> y,
                                      std::span<const int> negatives, const InnerMaxConfig& cfg, std::mt19937_64& rng) {
  const Layout l = layout(model, x);
  check_labels(l, y, model.num_classes());
  check_labels(l, negatives, model.num_classes());
  const Tensor x4 = x.reshaped(l.batch);
  const PerturbationBudget& b = cfg.budget;
  InnerMaxResult res;
  Tensor xa = b.random_init ? random_start(x4, b, rng) : x4;
  const auto steps = uniform_steps(l.n, b.step_size);
  const std::vector<int> labels(y.begin(), y.end()), neg(negatives.begin(), negatives.end());
  for (int t = 0; t < b.steps; ++t) {
    ag::Var xv(xa, true);
    AttrLossInputs in{xv, labels, neg, ag::Var(x4)};
    ag::Var obj = attribution_loss(model, in, cfg.variant, cfg.channel_mean, cfg.mode).loss;
    if (cfg.loss == InnerLoss::l_attr_plus_ce) {
      ag::GradModeGuard on(true);
      obj = ag::add(obj, cross_entropy(model.forward(xv, ActivationMode::relu()), labels));
    }
    res.objective_trace.push_back(obj.item());
    const ag::Var ins[] = {xv};
    const Tensor g = ag::grad(obj, ins)[0].value();
    ascend(xa, g, steps, l, b.norm);
    xa = project(xa, x4, b);
    if (attack_debug_checks()) check_budget(xa, x4, b);
  }
  res.x_adv = xa.reshaped(x.shape());
  return res;
}

}  // namespace art
