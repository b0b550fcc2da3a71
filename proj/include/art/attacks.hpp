#pragma once

// Input perturbations: PGD (linf / l2), SPSA, transfer evaluation, attribution
// attacks (untargeted top-k IFIA, targeted) and the ART inner maximization.
// Budgets are in raw [0,1] pixel space. All batch functions treat samples
// independently.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "art/attribution.hpp"
#include "art/losses.hpp"
#include "art/model.hpp"
#include "art/tensor.hpp"

namespace art {

enum class Norm { linf, l2 };
std::string to_string(Norm n);
Norm norm_from_string(const std::string& s);

struct PerturbationBudget {
  Norm norm = Norm::linf;
  double epsilon = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  int steps = 10;
  bool random_init = true;
  double lower = 0.0;
  double upper = 1.0;
};

struct AttackResult {
  Tensor perturbed;
  bool prediction_preserved = true;  // all samples
  int steps_taken = 0;
  std::vector<double> objective_trace;  // batch mean per step
  std::vector<bool> preserved;          // per sample
  std::vector<bool> skipped;            // misclassified on entry (attribution attacks)
  std::vector<std::int64_t> reverted_steps;  // per sample, attribution attacks
};

/// When enabled, every iterate of every attack is checked against its budget
/// and a std::logic_error is thrown on violation. Also enabled by the
/// ART_DEBUG_ATTACKS environment variable.
void set_attack_debug_checks(bool on);
bool attack_debug_checks();

/// Projects x_adv onto the budget ball around x and the valid range.
Tensor project(const Tensor& x_adv, const Tensor& x, const PerturbationBudget& budget);
/// Largest per-sample perturbation norm (in the budget's norm) over the batch.
double max_perturbation(const Tensor& x_adv, const Tensor& x, Norm norm);
/// Throws std::logic_error if x_adv leaves the budget or the valid range.
void check_budget(const Tensor& x_adv, const Tensor& x, const PerturbationBudget& budget);
/// Uniform (linf) or uniform-radius random direction (l2) start, projected.
Tensor random_start(const Tensor& x, const PerturbationBudget& budget, std::mt19937_64& rng);

/// Cross-entropy ascent on the exact ReLU pathway. x is [N, C, H, W].
AttackResult pgd_attack(const ModelBundle& model, const Tensor& x, std::span<const int> y, const PerturbationBudget& budget,
                        std::uint64_t seed = 0);

struct SpsaConfig {
  int batch_perturbations = 128;  // evaluations per gradient estimate (pairs * 2)
  double delta = 0.01;            // finite-difference scale
};

/// Black-box SPSA gradient of the per-sample cross-entropy at x ([C,H,W] or
/// [1,C,H,W]), from logits only.
Tensor spsa_gradient(const ModelBundle& model, const Tensor& x, int y, const SpsaConfig& cfg, std::mt19937_64& rng);

/// SPSA-driven projected ascent (signed steps for linf, normalized for l2).
AttackResult spsa_attack(const ModelBundle& model, const Tensor& x, std::span<const int> y, const PerturbationBudget& budget,
                         const SpsaConfig& cfg, std::uint64_t seed);

/// PGD on `source`, accuracy of `target` on the resulting inputs.
double transfer_attack_eval(const ModelBundle& source, const ModelBundle& target, const Tensor& x, std::span<const int> y,
                            const PerturbationBudget& budget, std::uint64_t seed = 0);

/// Fraction of samples classified correctly (exact pathway).
double accuracy(const ModelBundle& model, const Tensor& x, std::span<const int> y);

struct AttributionAttackConfig {
  AttributionConfig attribution;  // method and path settings used inside the attack
  AttributionConfig evaluation;   // settings used to score the result
  ActivationMode attack_mode = ActivationMode::softplus(50.0);
  ActivationMode eval_mode = ActivationMode::relu();
  std::int64_t k = 100;
  /// Samples attacked per graph; bounds memory of the double backward.
  std::int64_t chunk = 8;
};

/// Defaults for 32x32 inputs: k = 100, eps = 8/255, 50 steps of 1/255, no
/// random start.
PerturbationBudget ifia_default_budget();

/// Untargeted top-k attack: ascend -sum_{i in topk(|A(x)|)} |A(x_adv)_i|,
/// project, revert any step that changes the prediction, return the accepted
/// iterate with the best objective. Samples misclassified on entry are
/// returned unchanged and flagged in `skipped`.
AttackResult ifia_topk_attack(const ModelBundle& model, const Tensor& x, std::span<const int> y,
                              const PerturbationBudget& budget, const AttributionAttackConfig& cfg);

/// Targeted attack: ascend the share of |A(x_adv)| inside topk(|target|),
/// with the same projection and revert-on-flip rules.
AttackResult targeted_attribution_attack(const ModelBundle& model, const Tensor& x, std::span<const int> y,
                                         const Tensor& target_maps, const PerturbationBudget& budget,
                                         const AttributionAttackConfig& cfg);

enum class InnerLoss { l_attr, l_attr_plus_ce };

struct InnerMaxConfig {
  PerturbationBudget budget{Norm::linf, 8.0 / 255.0, 1.5 / 255.0, 3, true, 0.0, 1.0};
  InnerLoss loss = InnerLoss::l_attr;
  LossVariant variant = LossVariant::art_triplet;
  bool channel_mean = false;
  ActivationMode mode = ActivationMode::softplus(50.0);
};

struct InnerMaxResult {
  Tensor x_adv;
  std::vector<double> objective_trace;  // objective at the start and after each step
};

/// Random start in the budget, then `steps` signed ascent steps on the chosen
/// attribution loss (i* fixed from the clean logits), projected each step.
InnerMaxResult art_inner_maximization(const ModelBundle& model, const Tensor& x, std::span<const int> y,
                                      std::span<const int> negatives, const InnerMaxConfig& cfg, std::mt19937_64& rng);

}  // namespace art
