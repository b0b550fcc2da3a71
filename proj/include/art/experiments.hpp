#pragma once

// Experiment orchestration: config, evaluation suites, per-sample records,
// aggregated reports and their rendering.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "art/attacks.hpp"
#include "art/data.hpp"
#include "art/image.hpp"
#include "art/model.hpp"
#include "art/training.hpp"

namespace art {

struct ModelEntry {
  std::string name;
  TrainConfig train;
  /// Attack suites for this model; unset: the experiment-wide list.
  std::optional<std::vector<std::string>> attacks;
};

struct EvalConfig {
  std::int64_t samples = 200;            // correctly classified inputs for attribution suites
  std::int64_t accuracy_samples = 1000;  // clean and PGD accuracy slice
  std::int64_t k = 100;
  PerturbationBudget ifia{Norm::linf, 8.0 / 255.0, 1.0 / 255.0, 50, false};
  PerturbationBudget pgd{Norm::linf, 8.0 / 255.0, 2.0 / 255.0, 40, true};
  AttributionMethod method = AttributionMethod::integrated_gradients;
  int attack_ig_steps = 10;
  int eval_ig_steps = 50;
  double attack_beta = 50.0;
  std::vector<double> epsilons{2.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0, 12.0 / 255.0};
  std::int64_t sweep_samples = 50;
  std::int64_t targeted_pairs = 100;
  std::int64_t spsa_samples = 100;
  SpsaConfig spsa;
  std::string transfer_source;  // model name; empty: first model in the config
  double wsol_threshold = 0.2;
  std::int64_t wsol_images = 200;
  std::int64_t heatmap_samples = 4;
  std::int64_t batch = 50;
};

/// attacks: pgd, ifia, eps_sweep, targeted, spsa, transfer.
/// metrics: accuracy, cosine, wsol, heatmaps.
struct ExperimentConfig {
  std::string name = "experiment";
  DatasetSpec dataset;
  ArchitectureSpec architecture = ArchitectureSpec::small_cnn();
  /// Fill empty architecture normalization from training-split channel stats.
  bool normalize_inputs = true;
  std::vector<ModelEntry> models;
  std::vector<std::string> attacks{"pgd", "ifia"};
  std::vector<std::string> metrics{"accuracy", "cosine"};
  EvalConfig eval;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/experiment";
};

void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);
void to_json(nlohmann::json& j, const EvalConfig& c);
void from_json(const nlohmann::json& j, EvalConfig& c);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

std::string config_hash(const ExperimentConfig& cfg);
/// Architecture with input shape and class count from the training split and,
/// when normalize_inputs is set and none is given, its channel statistics.
ArchitectureSpec resolve_architecture(const ExperimentConfig& cfg, const Dataset& train);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
/// Natural, PGD-7 and ART models on the same architecture and seed.
ExperimentConfig preset_natural_pgd_art();

struct EpsilonPoint {
  double epsilon = 0;
  double topk = 0;
  double kendall = 0;
};

struct ModelRow {
  std::string name;
  std::string kind;
  std::optional<double> natural_acc;
  std::optional<double> pgd40_acc;
  std::optional<double> ifia_topk;
  std::optional<double> ifia_kendall;
  std::optional<double> cosine_mean;
  std::optional<double> spsa_acc;
  std::optional<double> transfer_acc;
  std::optional<double> targeted_success;       // share of pairs moved toward the target
  std::optional<double> targeted_sim_original;  // top-k intersection with the clean map
  std::optional<double> wsol_gt_known;
  std::optional<double> wsol_top1_loc;
  std::optional<double> wsol_top1_cls;
  std::vector<EpsilonPoint> eps_sweep;
  std::vector<double> ifia_topk_samples;
  std::vector<double> ifia_kendall_samples;
  std::vector<double> cosine_samples;
  double train_seconds = 0;
};

struct RobustnessReport {
  std::string name;
  std::string config_hash;
  std::string git_describe;
  std::string started_at;
  std::string finished_at;
  nlohmann::json config;
  std::vector<ModelRow> rows;
  std::vector<std::string> errors;  // "<stage>: <message>"
};

void to_json(nlohmann::json& j, const ModelRow& r);
void from_json(const nlohmann::json& j, ModelRow& r);
void to_json(nlohmann::json& j, const RobustnessReport& r);
void from_json(const nlohmann::json& j, RobustnessReport& r);

// Evaluation suites. Each returns one record per input; run_experiment
// persists them as CSV and aggregate_records rebuilds rows from those files.

struct AccuracyRecord {
  std::int64_t index = 0;
  int label = 0;
  int clean_pred = 0;
  int adv_pred = -1;  // -1: not attacked
};
std::vector<AccuracyRecord> evaluate_accuracy(const ModelBundle& model, const Dataset& data, std::int64_t count,
                                              const PerturbationBudget* pgd, std::uint64_t seed, std::int64_t batch);

/// Indices of the first `count` test inputs the model classifies correctly.
std::vector<std::int64_t> correctly_classified(const ModelBundle& model, const Dataset& data, std::int64_t count,
                                               std::int64_t batch = 100);

AttributionAttackConfig attack_config(const EvalConfig& eval);

struct IfiaRecord {
  std::int64_t index = 0;
  int label = 0;
  double topk = 0;
  double kendall = 0;
  bool preserved = true;
};
std::vector<IfiaRecord> evaluate_ifia(const ModelBundle& model, const Dataset& data,
                                      std::span<const std::int64_t> indices, const PerturbationBudget& budget,
                                      const AttributionAttackConfig& cfg, std::int64_t batch);

struct CosineRecord {
  std::int64_t index = 0;
  int label = 0;
  double cosine = 0;
};
std::vector<CosineRecord> evaluate_cosine(const ModelBundle& model, const Dataset& data,
                                          std::span<const std::int64_t> indices);

struct TargetedRecord {
  std::int64_t index = 0;
  std::int64_t target_index = 0;
  int label = 0;
  double sim_target_before = 0;
  double sim_target_after = 0;
  double sim_original_after = 0;
};
/// Pairs indices[i] with indices[(i + n/2) mod n]; the target is the clean
/// attribution map of the partner image.
std::vector<TargetedRecord> evaluate_targeted(const ModelBundle& model, const Dataset& data,
                                              std::span<const std::int64_t> indices, const PerturbationBudget& budget,
                                              const AttributionAttackConfig& cfg, std::int64_t batch);

struct RunOptions {
  bool resume = true;
  /// Trained models are handed to the caller (name, model) before evaluation.
  std::function<void(const std::string&, const ModelBundle&)> on_model;
};

/// Trains or loads every model, runs the configured suites on the test split,
/// writes per-sample CSVs under output_dir/<model>/ and renders the report.
/// Stage failures are recorded in report.errors; completed outputs stay.
RobustnessReport run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

/// Recomputes a row from the per-sample CSVs in `model_dir`.
ModelRow aggregate_records(const std::filesystem::path& model_dir, const std::string& name, const std::string& kind);

/// report.json, summary.csv and PNG plots for every suite with data.
void render_report(const RobustnessReport& report, const std::filesystem::path& dir);

/// Rows: inputs; columns: the image followed by one clean and one attacked
/// heatmap per model.
Image heatmap_grid(const std::vector<Tensor>& images, const std::vector<std::vector<Tensor>>& maps01, int scale = 3);

std::string git_describe();
std::string utc_timestamp();

}  // namespace art
