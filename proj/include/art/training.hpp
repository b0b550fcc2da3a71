#pragma once

// ART training (inner maximization of the attribution loss, outer CE + lambda
// * L_attr), its loss variants, and the natural / PGD-adversarial baselines.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "art/attacks.hpp"
#include "art/data.hpp"
#include "art/losses.hpp"
#include "art/model.hpp"
#include "art/optim.hpp"

namespace art {

enum class TrainingKind { natural, pgd_adversarial, art };
std::string to_string(TrainingKind k);
TrainingKind training_kind_from_string(const std::string& s);

struct ARTConfig {
  double lambda = 0.5;
  double beta = 50.0;
  PerturbationBudget inner_budget{Norm::linf, 8.0 / 255.0, 1.5 / 255.0, 3, true, 0.0, 1.0};
  LossVariant loss_variant = LossVariant::art_triplet;
  bool channel_mean = false;
  InnerLoss inner_loss = InnerLoss::l_attr;
};

struct TrainConfig {
  TrainingKind kind = TrainingKind::art;
  ARTConfig art;
  PerturbationBudget pgd{Norm::linf, 8.0 / 255.0, 2.0 / 255.0, 7, true, 0.0, 1.0};
  int epochs = 10;
  int batch_size = 64;
  /// Leading epochs trained naturally before the selected objective.
  int warmup_epochs = 0;
  SgdConfig sgd;
  StepSchedule schedule{0.05, {}, {}};
  int crop_pad = 0;
  bool flip = false;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const PerturbationBudget& b);
void from_json(const nlohmann::json& j, PerturbationBudget& b);
void to_json(nlohmann::json& j, const ARTConfig& c);
void from_json(const nlohmann::json& j, ARTConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Stable hash of the canonical JSON form.
std::string config_hash(const TrainConfig& cfg);

struct StepStats {
  double ce = 0;
  double attr = 0;   // L_attr at the final perturbed batch (0 for baselines)
  double total = 0;
  double d_pos = 0;  // means over non-degenerate samples
  double d_neg = 0;
  int valid = 0;     // non-degenerate samples
  double accuracy = 0;  // on the training inputs actually used, exact pathway
  /// Inner objective before each ascent step, then L_attr at the final iterate.
  std::vector<double> inner_trace;
};

/// One ART step: i* from clean exact-pathway logits, inner maximization in
/// softplus(beta) mode, then SGD on CE(x~) [exact ReLU] + lambda * L_attr(x~)
/// [softplus]. Throws NonFiniteLossError on a NaN/Inf loss.
StepStats art_train_step(ModelBundle& model, const Tensor& x, std::span<const int> y, const ARTConfig& cfg,
                         OptimizerState& state, const SgdConfig& sgd, double lr, std::mt19937_64& rng);
/// art_train_step with the attribution term swapped for `variant`.
StepStats loss_variant_step(ModelBundle& model, const Tensor& x, std::span<const int> y, ARTConfig cfg,
                            LossVariant variant, OptimizerState& state, const SgdConfig& sgd, double lr,
                            std::mt19937_64& rng);
StepStats natural_train_step(ModelBundle& model, const Tensor& x, std::span<const int> y, OptimizerState& state,
                             const SgdConfig& sgd, double lr);
/// CE on PGD-perturbed inputs (exact pathway); steps = 0 without random
/// start is a natural step.
StepStats pgd_train_step(ModelBundle& model, const Tensor& x, std::span<const int> y, const PerturbationBudget& budget,
                         OptimizerState& state, const SgdConfig& sgd, double lr, std::uint64_t seed);

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double ce = 0;
  double attr = 0;
  double d_pos = 0;
  double d_neg = 0;
  double train_accuracy = 0;
  double test_accuracy = -1;  // -1 when no evaluation set
  /// Share of batches whose final L_attr is at least the value at the start.
  double ascent_fraction = 0;
  double seconds = 0;
};

struct TrainOptions {
  /// Receives metrics.csv and checkpoint.bin; empty disables persistence.
  std::filesystem::path output_dir;
  bool resume = true;
  int checkpoint_every = 1;
  const Dataset* eval = nullptr;
  std::int64_t eval_samples = 1000;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int resumed_from = 0;  // epochs restored from a checkpoint
  OptimizerState optimizer;
};

/// Epoch loop. Batch order and per-step randomness derive from
/// (seed, epoch), so a resumed run matches an uninterrupted one. Resuming from
/// a checkpoint with a different config hash throws ConfigMismatchError.
TrainResult train_model(ModelBundle& model, const Dataset& train, const TrainConfig& cfg, const TrainOptions& opts = {});

/// Natural or PGD-adversarial training of `model`.
ModelBundle baseline_train(ModelBundle model, const Dataset& train, TrainingKind kind, TrainConfig cfg,
                           const TrainOptions& opts = {});

}  // namespace art
