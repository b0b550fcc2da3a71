#include "art/experiments.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fmt/format.h>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <spdlog/spdlog.h>
#include <sstream>

#include "art/errors.hpp"
#include "art/io.hpp"
#include "art/metrics.hpp"
#include "art/plot.hpp"
#include "art/wsol.hpp"

namespace art {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const std::set<std::string> kAttacks{"pgd", "ifia", "eps_sweep", "targeted", "spsa", "transfer"};
const std::set<std::string> kMetrics{"accuracy", "cosine", "wsol", "heatmaps"};

bool has(const std::vector<std::string>& v, const std::string& s) { return std::find(v.begin(), v.end(), s) != v.end(); }

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stage_seed(std::uint64_t base, std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : tag) h = (h ^ c) * 0x100000001b3ULL;
  return splitmix(base ^ h);
}

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  return fmt::format("{:.17g}", v);
}

double parse_num(const std::string& s) {
  if (s == "nan" || s.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::stod(s);
}

std::optional<double> finite_mean(const std::vector<double>& v) {
  double sum = 0;
  std::int64_t n = 0;
  for (double x : v) {
    if (std::isfinite(x)) sum += x, ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw InputError("csv column missing: " + name);
    return static_cast<std::size_t>(it - header.begin());
  }
};

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::optional<Csv> read_csv(const fs::path& path) {
  if (!fs::exists(path)) return std::nullopt;
  std::istringstream in(read_file(path));
  Csv csv;
  std::string line;
  if (!std::getline(in, line)) return csv;
  csv.header = split_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_line(line);
    cells.resize(csv.header.size());
    csv.rows.push_back(std::move(cells));
  }
  return csv;
}

std::vector<int> labels_of(const Dataset& data, std::span<const std::int64_t> idx) {
  std::vector<int> y;
  y.reserve(idx.size());
  for (auto i : idx) y.push_back(data.labels[static_cast<std::size_t>(i)]);
  return y;
}

Tensor images_of(const Dataset& data, std::span<const std::int64_t> idx) { return data.subset(idx).images; }

std::vector<Tensor> split_rows(const Tensor& batch) {
  std::vector<Tensor> out;
  for (std::int64_t i = 0; i < batch.dim(0); ++i) out.push_back(batch.slice_rows(i, i + 1));
  return out;
}

Tensor batch_attributions(const ModelBundle& model, const Tensor& x, std::span<const int> y, const AttributionConfig& cfg,
                          ActivationMode mode) {
  return attribution_graph(model, ag::Var(x), y, cfg, mode, false).value();
}

template <class F>
void for_chunks(std::size_t n, std::int64_t batch, F&& f) {
  const auto b = static_cast<std::size_t>(std::max<std::int64_t>(batch, 1));
  for (std::size_t s = 0; s < n; s += b) f(s, std::min(n, s + b));
}

SimilarityScore similarity(const Tensor& a, const Tensor& b, std::int64_t k) {
  SimilarityScore s;
  const Tensor aa = abs_scores(a), ab = abs_scores(b);
  s.k = k;
  s.topk_intersection = topk_intersection(aa.data(), ab.data(), k);
  try {
    s.kendall_tau = kendall_tau(aa.data(), ab.data());
  } catch (const DegenerateInputError&) {
    s.kendall_tau = std::numeric_limits<double>::quiet_NaN();
  }
  return s;
}

void write_records(const fs::path& path, const std::string& header, const std::vector<std::string>& lines) {
  std::string out = header + "\n";
  for (const auto& l : lines) out += l + "\n";
  write_file_atomic(path, out);
}

void put_opt(json& j, const char* key, const std::optional<double>& v) { j[key] = v ? json(*v) : json(nullptr); }
std::optional<double> get_opt(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

void to_json(json& j, const DatasetSpec& s) {
  j = {{"id", s.id},
       {"root", s.root.string()},
       {"train_size", s.train_size},
       {"test_size", s.test_size},
       {"seed", s.seed},
       {"balance_classes", s.balance_classes},
       {"synthetic",
        {{"image_size", s.synthetic.image_size},
         {"contrast_lo", s.synthetic.contrast_lo},
         {"contrast_hi", s.synthetic.contrast_hi},
         {"noise", s.synthetic.noise},
         {"radius_lo", s.synthetic.radius_lo},
         {"radius_hi", s.synthetic.radius_hi}}}};
}

void from_json(const json& j, DatasetSpec& s) {
  s = DatasetSpec{};
  s.id = j.value("id", s.id);
  s.root = j.value("root", std::string{});
  s.train_size = j.value("train_size", s.train_size);
  s.test_size = j.value("test_size", s.test_size);
  s.seed = j.value("seed", s.seed);
  s.balance_classes = j.value("balance_classes", s.balance_classes);
  if (j.contains("synthetic")) {
    const auto& o = j.at("synthetic");
    auto& g = s.synthetic;
    g.image_size = o.value("image_size", g.image_size);
    g.contrast_lo = o.value("contrast_lo", g.contrast_lo);
    g.contrast_hi = o.value("contrast_hi", g.contrast_hi);
    g.noise = o.value("noise", g.noise);
    g.radius_lo = o.value("radius_lo", g.radius_lo);
    g.radius_hi = o.value("radius_hi", g.radius_hi);
  }
}

void to_json(json& j, const EvalConfig& c) {
  j = {{"samples", c.samples},
       {"accuracy_samples", c.accuracy_samples},
       {"k", c.k},
       {"ifia", c.ifia},
       {"pgd", c.pgd},
       {"method", to_string(c.method)},
       {"attack_ig_steps", c.attack_ig_steps},
       {"eval_ig_steps", c.eval_ig_steps},
       {"attack_beta", c.attack_beta},
       {"epsilons", c.epsilons},
       {"sweep_samples", c.sweep_samples},
       {"targeted_pairs", c.targeted_pairs},
       {"spsa_samples", c.spsa_samples},
       {"spsa", {{"batch_perturbations", c.spsa.batch_perturbations}, {"delta", c.spsa.delta}}},
       {"transfer_source", c.transfer_source},
       {"wsol_threshold", c.wsol_threshold},
       {"wsol_images", c.wsol_images},
       {"heatmap_samples", c.heatmap_samples},
       {"batch", c.batch}};
}

void from_json(const json& j, EvalConfig& c) {
  c = EvalConfig{};
  c.samples = j.value("samples", c.samples);
  c.accuracy_samples = j.value("accuracy_samples", c.accuracy_samples);
  c.k = j.value("k", c.k);
  if (j.contains("ifia")) c.ifia = j.at("ifia").get<PerturbationBudget>();
  if (j.contains("pgd")) c.pgd = j.at("pgd").get<PerturbationBudget>();
  c.method = attribution_method_from_string(j.value("method", to_string(c.method)));
  c.attack_ig_steps = j.value("attack_ig_steps", c.attack_ig_steps);
  c.eval_ig_steps = j.value("eval_ig_steps", c.eval_ig_steps);
  c.attack_beta = j.value("attack_beta", c.attack_beta);
  c.epsilons = j.value("epsilons", c.epsilons);
  c.sweep_samples = j.value("sweep_samples", c.sweep_samples);
  c.targeted_pairs = j.value("targeted_pairs", c.targeted_pairs);
  c.spsa_samples = j.value("spsa_samples", c.spsa_samples);
  if (j.contains("spsa")) {
    c.spsa.batch_perturbations = j.at("spsa").value("batch_perturbations", c.spsa.batch_perturbations);
    c.spsa.delta = j.at("spsa").value("delta", c.spsa.delta);
  }
  c.transfer_source = j.value("transfer_source", c.transfer_source);
  c.wsol_threshold = j.value("wsol_threshold", c.wsol_threshold);
  c.wsol_images = j.value("wsol_images", c.wsol_images);
  c.heatmap_samples = j.value("heatmap_samples", c.heatmap_samples);
  c.batch = j.value("batch", c.batch);
  if (c.k <= 0) throw InputError("k must be positive");
  if (c.attack_ig_steps <= 0 || c.eval_ig_steps <= 0) throw InputError("IG step counts must be positive");
  if (c.attack_beta <= 0) throw InputError("attack_beta must be positive");
  if (c.batch <= 0) throw InputError("batch must be positive");
}

void to_json(json& j, const ExperimentConfig& c) {
  json models = json::array();
  for (const auto& m : c.models) {
    json e = {{"name", m.name}, {"train", m.train}};
    if (m.attacks) e["attacks"] = *m.attacks;
    models.push_back(std::move(e));
  }
  j = {{"name", c.name},
       {"dataset", c.dataset},
       {"architecture", c.architecture},
       {"normalize_inputs", c.normalize_inputs},
       {"models", models},
       {"attacks", c.attacks},
       {"metrics", c.metrics},
       {"eval", c.eval},
       {"seed", c.seed},
       {"output_dir", c.output_dir.string()}};
}

void from_json(const json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  c.name = j.value("name", c.name);
  if (j.contains("dataset")) c.dataset = j.at("dataset").get<DatasetSpec>();
  if (j.contains("architecture")) c.architecture = j.at("architecture").get<ArchitectureSpec>();
  c.normalize_inputs = j.value("normalize_inputs", c.normalize_inputs);
  if (j.contains("models")) {
    std::set<std::string> names;
    for (const auto& m : j.at("models")) {
      ModelEntry e;
      e.name = m.at("name").get<std::string>();
      if (m.contains("train")) e.train = m.at("train").get<TrainConfig>();
      if (m.contains("attacks")) e.attacks = m.at("attacks").get<std::vector<std::string>>();
      if (e.name.empty() || e.name.find_first_of("/\\,") != std::string::npos) {
        throw InputError("invalid model name: '" + e.name + "'");
      }
      if (!names.insert(e.name).second) throw InputError("duplicate model name: " + e.name);
      c.models.push_back(std::move(e));
    }
  }
  c.attacks = j.value("attacks", c.attacks);
  c.metrics = j.value("metrics", c.metrics);
  auto check_attacks = [](const std::vector<std::string>& list) {
    for (const auto& a : list) {
      if (!kAttacks.contains(a)) throw InputError("unknown attack suite: " + a);
    }
  };
  check_attacks(c.attacks);
  for (const auto& m : c.models) {
    if (m.attacks) check_attacks(*m.attacks);
  }
  for (const auto& m : c.metrics) {
    if (!kMetrics.contains(m)) throw InputError("unknown metric suite: " + m);
  }
  if (j.contains("eval")) c.eval = j.at("eval").get<EvalConfig>();
  c.seed = j.value("seed", c.seed);
  c.output_dir = j.value("output_dir", c.output_dir.string());
}

std::string config_hash(const ExperimentConfig& cfg) {
  json j = cfg;
  j.erase("output_dir");
  return fnv1a_hex(j.dump());
}

ArchitectureSpec resolve_architecture(const ExperimentConfig& cfg, const Dataset& train) {
  ArchitectureSpec arch = cfg.architecture;
  arch.input_shape = train.item_shape();
  arch.num_classes = train.num_classes;
  if (cfg.normalize_inputs && arch.norm_mean.empty()) {
    auto stats = channel_stats(train);
    arch.norm_mean = std::move(stats.mean);
    arch.norm_std = std::move(stats.std);
  }
  return arch;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  if (!fs::exists(path)) throw PathError("config file not found: " + path.string());
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw InputError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return j.get<ExperimentConfig>();
}

ExperimentConfig preset_natural_pgd_art() {
  ExperimentConfig c;
  c.name = "natural_pgd_art";
  TrainConfig base;
  base.epochs = 10;
  base.schedule = {0.05, {4}, {0.2}};
  ModelEntry nat{"natural", base, std::nullopt};
  nat.train.kind = TrainingKind::natural;
  ModelEntry pgd{"pgd7", base, std::nullopt};
  pgd.train.kind = TrainingKind::pgd_adversarial;
  pgd.train.warmup_epochs = 4;
  ModelEntry art{"art", base, std::nullopt};
  art.train.kind = TrainingKind::art;
  art.train.warmup_epochs = 4;
  c.models = {nat, pgd, art};
  c.attacks = {"pgd", "ifia", "eps_sweep", "targeted"};
  c.metrics = {"accuracy", "cosine", "heatmaps"};
  return c;
}

void to_json(json& j, const ModelRow& r) {
  j = json::object();
  j["name"] = r.name;
  j["kind"] = r.kind;
  put_opt(j, "natural_acc", r.natural_acc);
  put_opt(j, "pgd40_acc", r.pgd40_acc);
  put_opt(j, "ifia_topk", r.ifia_topk);
  put_opt(j, "ifia_kendall", r.ifia_kendall);
  put_opt(j, "cosine_mean", r.cosine_mean);
  put_opt(j, "spsa_acc", r.spsa_acc);
  put_opt(j, "transfer_acc", r.transfer_acc);
  put_opt(j, "targeted_success", r.targeted_success);
  put_opt(j, "targeted_sim_original", r.targeted_sim_original);
  put_opt(j, "wsol_gt_known", r.wsol_gt_known);
  put_opt(j, "wsol_top1_loc", r.wsol_top1_loc);
  put_opt(j, "wsol_top1_cls", r.wsol_top1_cls);
  json eps = json::array();
  for (const auto& p : r.eps_sweep) eps.push_back({{"epsilon", p.epsilon}, {"topk", p.topk}, {"kendall", p.kendall}});
  j["eps_sweep"] = eps;
  auto samples = [](const std::vector<double>& v) {
    json a = json::array();
    for (double x : v) a.push_back(std::isfinite(x) ? json(x) : json(nullptr));
    return a;
  };
  j["ifia_topk_samples"] = samples(r.ifia_topk_samples);
  j["ifia_kendall_samples"] = samples(r.ifia_kendall_samples);
  j["cosine_samples"] = samples(r.cosine_samples);
  j["train_seconds"] = r.train_seconds;
}

void from_json(const json& j, ModelRow& r) {
  r = ModelRow{};
  r.name = j.value("name", "");
  r.kind = j.value("kind", "");
  r.natural_acc = get_opt(j, "natural_acc");
  r.pgd40_acc = get_opt(j, "pgd40_acc");
  r.ifia_topk = get_opt(j, "ifia_topk");
  r.ifia_kendall = get_opt(j, "ifia_kendall");
  r.cosine_mean = get_opt(j, "cosine_mean");
  r.spsa_acc = get_opt(j, "spsa_acc");
  r.transfer_acc = get_opt(j, "transfer_acc");
  r.targeted_success = get_opt(j, "targeted_success");
  r.targeted_sim_original = get_opt(j, "targeted_sim_original");
  r.wsol_gt_known = get_opt(j, "wsol_gt_known");
  r.wsol_top1_loc = get_opt(j, "wsol_top1_loc");
  r.wsol_top1_cls = get_opt(j, "wsol_top1_cls");
  for (const auto& p : j.value("eps_sweep", json::array())) {
    r.eps_sweep.push_back({p.at("epsilon"), p.at("topk"), p.at("kendall")});
  }
  auto samples = [&](const char* key) {
    std::vector<double> v;
    for (const auto& x : j.value(key, json::array())) {
      v.push_back(x.is_null() ? std::numeric_limits<double>::quiet_NaN() : x.get<double>());
    }
    return v;
  };
  r.ifia_topk_samples = samples("ifia_topk_samples");
  r.ifia_kendall_samples = samples("ifia_kendall_samples");
  r.cosine_samples = samples("cosine_samples");
  r.train_seconds = j.value("train_seconds", 0.0);
}

void to_json(json& j, const RobustnessReport& r) {
  j = {{"name", r.name},
       {"config_hash", r.config_hash},
       {"git_describe", r.git_describe},
       {"started_at", r.started_at},
       {"finished_at", r.finished_at},
       {"config", r.config},
       {"rows", r.rows},
       {"errors", r.errors}};
}

void from_json(const json& j, RobustnessReport& r) {
  r = RobustnessReport{};
  r.name = j.value("name", "");
  r.config_hash = j.value("config_hash", "");
  r.git_describe = j.value("git_describe", "");
  r.started_at = j.value("started_at", "");
  r.finished_at = j.value("finished_at", "");
  r.config = j.value("config", json::object());
  r.rows = j.value("rows", std::vector<ModelRow>{});
  r.errors = j.value("errors", std::vector<std::string>{});
}

std::vector<AccuracyRecord> evaluate_accuracy(const ModelBundle& model, const Dataset& data, std::int64_t count,
                                              const PerturbationBudget* pgd, std::uint64_t seed, std::int64_t batch) {
  const std::int64_t n = count > 0 ? std::min(count, data.size()) : data.size();
  std::vector<AccuracyRecord> out;
  for_chunks(static_cast<std::size_t>(n), batch, [&](std::size_t s, std::size_t e) {
    std::vector<std::int64_t> idx(e - s);
    std::iota(idx.begin(), idx.end(), static_cast<std::int64_t>(s));
    const Tensor x = images_of(data, idx);
    const auto y = labels_of(data, idx);
    const auto clean = predict(model, x);
    std::vector<int> adv(idx.size(), -1);
    if (pgd) {
      const auto res = pgd_attack(model, x, y, *pgd, splitmix(seed + s));
      adv = predict(model, res.perturbed);
    }
    for (std::size_t i = 0; i < idx.size(); ++i) out.push_back({idx[i], y[i], clean[i], adv[i]});
  });
  return out;
}

std::vector<std::int64_t> correctly_classified(const ModelBundle& model, const Dataset& data, std::int64_t count,
                                               std::int64_t batch) {
  std::vector<std::int64_t> out;
  const auto n = static_cast<std::size_t>(data.size());
  for (std::size_t s = 0; s < n && static_cast<std::int64_t>(out.size()) < count;
       s += static_cast<std::size_t>(batch)) {
    const std::size_t e = std::min(n, s + static_cast<std::size_t>(batch));
    std::vector<std::int64_t> idx(e - s);
    std::iota(idx.begin(), idx.end(), static_cast<std::int64_t>(s));
    const auto pred = predict(model, images_of(data, idx));
    for (std::size_t i = 0; i < idx.size() && static_cast<std::int64_t>(out.size()) < count; ++i) {
      if (pred[i] == data.labels[static_cast<std::size_t>(idx[i])]) out.push_back(idx[i]);
    }
  }
  return out;
}

AttributionAttackConfig attack_config(const EvalConfig& eval) {
  AttributionAttackConfig c;
  c.attribution.method = eval.method;
  c.attribution.ig.riemann_steps = eval.attack_ig_steps;
  c.evaluation.method = eval.method;
  c.evaluation.ig.riemann_steps = eval.eval_ig_steps;
  c.attack_mode = ActivationMode::softplus(eval.attack_beta);
  c.eval_mode = ActivationMode::relu();
  c.k = eval.k;
  return c;
}

std::vector<IfiaRecord> evaluate_ifia(const ModelBundle& model, const Dataset& data, std::span<const std::int64_t> indices,
                                      const PerturbationBudget& budget, const AttributionAttackConfig& cfg,
                                      std::int64_t batch) {
  std::vector<IfiaRecord> out;
  for_chunks(indices.size(), batch, [&](std::size_t s, std::size_t e) {
    const auto idx = indices.subspan(s, e - s);
    const Tensor x = images_of(data, idx);
    const auto y = labels_of(data, idx);
    const auto res = ifia_topk_attack(model, x, y, budget, cfg);
    const auto before = split_rows(batch_attributions(model, x, y, cfg.evaluation, cfg.eval_mode));
    const auto after = split_rows(batch_attributions(model, res.perturbed, y, cfg.evaluation, cfg.eval_mode));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto sim = similarity(before[i], after[i], cfg.k);
      const bool kept = i < res.preserved.size() ? static_cast<bool>(res.preserved[i]) : res.prediction_preserved;
      out.push_back({idx[i], y[i], sim.topk_intersection, sim.kendall_tau, kept});
    }
  });
  return out;
}

std::vector<CosineRecord> evaluate_cosine(const ModelBundle& model, const Dataset& data,
                                          std::span<const std::int64_t> indices) {
  std::vector<CosineRecord> out;
  for (auto i : indices) {
    const Tensor x = data.image(i);
    const int y = data.labels[static_cast<std::size_t>(i)];
    const Tensor g = input_gradient(model, x, y, ActivationMode::relu());
    double c;
    try {
      c = cosine_alignment(x, g);
    } catch (const DegenerateInputError&) {
      c = std::numeric_limits<double>::quiet_NaN();
    }
    out.push_back({i, y, c});
  }
  return out;
}

std::vector<TargetedRecord> evaluate_targeted(const ModelBundle& model, const Dataset& data,
                                              std::span<const std::int64_t> indices, const PerturbationBudget& budget,
                                              const AttributionAttackConfig& cfg, std::int64_t batch) {
  const std::size_t n = indices.size();
  std::vector<TargetedRecord> out;
  if (n < 2) return out;
  std::vector<std::int64_t> partners(n);
  for (std::size_t i = 0; i < n; ++i) partners[i] = indices[(i + n / 2) % n];
  for_chunks(n, batch, [&](std::size_t s, std::size_t e) {
    const auto idx = indices.subspan(s, e - s);
    const auto tidx = std::span<const std::int64_t>(partners).subspan(s, e - s);
    const Tensor x = images_of(data, idx);
    const auto y = labels_of(data, idx);
    const Tensor xt = images_of(data, tidx);
    const auto yt = labels_of(data, tidx);
    const Tensor targets = batch_attributions(model, xt, yt, cfg.evaluation, cfg.eval_mode);
    const auto res = targeted_attribution_attack(model, x, y, targets, budget, cfg);
    const auto before = split_rows(batch_attributions(model, x, y, cfg.evaluation, cfg.eval_mode));
    const auto after = split_rows(batch_attributions(model, res.perturbed, y, cfg.evaluation, cfg.eval_mode));
    const auto target_rows = split_rows(targets);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto sb = similarity(before[i], target_rows[i], cfg.k);
      const auto sa = similarity(after[i], target_rows[i], cfg.k);
      const auto so = similarity(after[i], before[i], cfg.k);
      out.push_back({idx[i], tidx[i], y[i], sb.topk_intersection, sa.topk_intersection, so.topk_intersection});
    }
  });
  return out;
}

ModelRow aggregate_records(const fs::path& dir, const std::string& name, const std::string& kind) {
  ModelRow row;
  row.name = name;
  row.kind = kind;
  if (auto csv = read_csv(dir / "accuracy.csv")) {
    const auto cl = csv->col("label"), cp = csv->col("clean_pred"), ap = csv->col("adv_pred");
    std::vector<double> clean, adv;
    for (const auto& r : csv->rows) {
      clean.push_back(r[cp] == r[cl] ? 1.0 : 0.0);
      if (r[ap] != "-1") adv.push_back(r[ap] == r[cl] ? 1.0 : 0.0);
    }
    row.natural_acc = finite_mean(clean);
    row.pgd40_acc = finite_mean(adv);
  }
  if (auto csv = read_csv(dir / "ifia.csv")) {
    const auto ct = csv->col("topk"), ck = csv->col("kendall");
    for (const auto& r : csv->rows) {
      row.ifia_topk_samples.push_back(parse_num(r[ct]));
      row.ifia_kendall_samples.push_back(parse_num(r[ck]));
    }
    row.ifia_topk = finite_mean(row.ifia_topk_samples);
    row.ifia_kendall = finite_mean(row.ifia_kendall_samples);
  }
  if (auto csv = read_csv(dir / "cosine.csv")) {
    const auto cc = csv->col("cosine");
    for (const auto& r : csv->rows) row.cosine_samples.push_back(parse_num(r[cc]));
    row.cosine_mean = finite_mean(row.cosine_samples);
  }
  if (auto csv = read_csv(dir / "eps_sweep.csv")) {
    const auto ce = csv->col("epsilon"), ct = csv->col("topk"), ck = csv->col("kendall");
    std::vector<std::string> order;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> groups;
    for (const auto& r : csv->rows) {
      if (!groups.contains(r[ce])) order.push_back(r[ce]);
      groups[r[ce]].first.push_back(parse_num(r[ct]));
      groups[r[ce]].second.push_back(parse_num(r[ck]));
    }
    for (const auto& e : order) {
      const auto& g = groups[e];
      row.eps_sweep.push_back({parse_num(e), finite_mean(g.first).value_or(std::nan("")),
                               finite_mean(g.second).value_or(std::nan(""))});
    }
  }
  if (auto csv = read_csv(dir / "targeted.csv")) {
    const auto cb = csv->col("sim_target_before"), ca = csv->col("sim_target_after"), co = csv->col("sim_original_after");
    std::vector<double> success, orig;
    for (const auto& r : csv->rows) {
      success.push_back(parse_num(r[ca]) > parse_num(r[cb]) ? 1.0 : 0.0);
      orig.push_back(parse_num(r[co]));
    }
    row.targeted_success = finite_mean(success);
    row.targeted_sim_original = finite_mean(orig);
  }
  auto adv_accuracy = [&](const char* file) -> std::optional<double> {
    auto csv = read_csv(dir / file);
    if (!csv) return std::nullopt;
    const auto cl = csv->col("label"), ap = csv->col("adv_pred");
    std::vector<double> v;
    for (const auto& r : csv->rows) v.push_back(r[ap] == r[cl] ? 1.0 : 0.0);
    return finite_mean(v);
  };
  row.spsa_acc = adv_accuracy("spsa.csv");
  row.transfer_acc = adv_accuracy("transfer.csv");
  if (auto csv = read_csv(dir / "wsol.csv")) {
    const auto cl = csv->col("label"), cp = csv->col("predicted"), ci = csv->col("iou");
    std::vector<double> known, loc, cls;
    for (const auto& r : csv->rows) {
      const bool hit = parse_num(r[ci]) >= 0.5;
      const bool correct = r[cl] == r[cp];
      known.push_back(hit ? 1.0 : 0.0);
      loc.push_back(hit && correct ? 1.0 : 0.0);
      cls.push_back(correct ? 1.0 : 0.0);
    }
    row.wsol_gt_known = finite_mean(known);
    row.wsol_top1_loc = finite_mean(loc);
    row.wsol_top1_cls = finite_mean(cls);
  }
  return row;
}

Image heatmap_grid(const std::vector<Tensor>& images, const std::vector<std::vector<Tensor>>& maps01, int scale) {
  if (images.empty()) return Image(1, 1);
  const Image first = image_from_tensor(images[0]).upscaled(scale);
  const int cw = first.width, ch = first.height, pad = 2;
  std::size_t cols = 1;
  for (const auto& row : maps01) cols = std::max(cols, row.size() + 1);
  Image grid(static_cast<int>(cols) * (cw + pad) + pad, static_cast<int>(images.size()) * (ch + pad) + pad);
  for (std::size_t r = 0; r < images.size(); ++r) {
    const int y = pad + static_cast<int>(r) * (ch + pad);
    grid.blit(image_from_tensor(images[r]).upscaled(scale), pad, y);
    if (r >= maps01.size()) continue;
    for (std::size_t c = 0; c < maps01[r].size(); ++c) {
      grid.blit(render_map(maps01[r][c], true).upscaled(scale), pad + static_cast<int>(c + 1) * (cw + pad), y);
    }
  }
  return grid;
}

std::string git_describe() {
  std::array<char, 256> buf{};
  std::string out;
  std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen("git describe --always --dirty 2>/dev/null", "r"), pclose);
  if (!pipe) return "unknown";
  while (fgets(buf.data(), static_cast<int>(buf.size()), pipe.get())) out += buf.data();
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out.empty() ? "unknown" : out;
}

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void render_report(const RobustnessReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  write_file_atomic(dir / "report.json", json(report).dump(2) + "\n");
  std::string csv =
      "model,kind,natural_acc,pgd40_acc,ifia_topk,ifia_kendall,cosine_mean,spsa_acc,transfer_acc,targeted_success,"
      "targeted_sim_original,wsol_gt_known,wsol_top1_loc,wsol_top1_cls\n";
  auto cell = [](const std::optional<double>& v) { return v ? fmt::format("{:.6f}", *v) : std::string{}; };
  for (const auto& r : report.rows) {
    csv += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n", r.name, r.kind, cell(r.natural_acc), cell(r.pgd40_acc),
                       cell(r.ifia_topk), cell(r.ifia_kendall), cell(r.cosine_mean), cell(r.spsa_acc),
                       cell(r.transfer_acc), cell(r.targeted_success), cell(r.targeted_sim_original),
                       cell(r.wsol_gt_known), cell(r.wsol_top1_loc), cell(r.wsol_top1_cls));
  }
  write_file_atomic(dir / "summary.csv", csv);

  std::vector<Series> topk_series, kendall_series;
  std::vector<BoxGroup> topk_box, kendall_box, cosine_box;
  for (const auto& r : report.rows) {
    if (!r.eps_sweep.empty()) {
      Series t{r.name, {}, {}}, k{r.name, {}, {}};
      for (const auto& p : r.eps_sweep) {
        t.x.push_back(p.epsilon * 255.0);
        t.y.push_back(p.topk);
        k.x.push_back(p.epsilon * 255.0);
        k.y.push_back(p.kendall);
      }
      topk_series.push_back(std::move(t));
      kendall_series.push_back(std::move(k));
    }
    if (!r.ifia_topk_samples.empty()) {
      topk_box.push_back({r.name, r.ifia_topk_samples});
      kendall_box.push_back({r.name, r.ifia_kendall_samples});
    }
    if (!r.cosine_samples.empty()) cosine_box.push_back({r.name, r.cosine_samples});
  }
  if (!topk_series.empty()) {
    write_png(dir / "eps_sweep_topk.png", line_plot("top-k intersection vs eps", "eps (x/255)", "top-k", topk_series,
                                                    std::pair{0.0, 1.0}));
    write_png(dir / "eps_sweep_kendall.png", line_plot("kendall tau vs eps", "eps (x/255)", "kendall", kendall_series,
                                                       std::pair{-1.0, 1.0}));
  }
  if (!topk_box.empty()) {
    write_png(dir / "ifia_topk_box.png", box_plot("top-k intersection after attack", "top-k", topk_box, std::pair{0.0, 1.0}));
    write_png(dir / "ifia_kendall_box.png", box_plot("kendall tau after attack", "kendall", kendall_box, std::pair{-1.0, 1.0}));
  }
  if (!cosine_box.empty()) {
    write_png(dir / "cosine_box.png", box_plot("cosine(x, input gradient)", "cosine", cosine_box, std::pair{-1.0, 1.0}));
  }
}

RobustnessReport run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  if (cfg.models.empty()) throw InputError("experiment has no models");
  RobustnessReport report;
  report.name = cfg.name;
  report.config_hash = config_hash(cfg);
  report.git_describe = git_describe();
  report.started_at = utc_timestamp();
  report.config = cfg;
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);

  const fs::path cfg_path = out / "config.json";
  if (fs::exists(cfg_path) && opts.resume) {
    const json prev = json::parse(read_file(cfg_path));
    const std::string prev_hash = prev.value("config_hash", "");
    if (prev_hash != report.config_hash) {
      throw ConfigMismatchError(fmt::format("{} was written by config {}; this config is {}", out.string(), prev_hash,
                                            report.config_hash));
    }
  }
  write_file_atomic(cfg_path, json{{"config_hash", report.config_hash}, {"config", cfg}}.dump(2) + "\n");

  auto stage = [&](const std::string& label, auto&& fn) {
    try {
      fn();
      return true;
    } catch (const std::exception& e) {
      spdlog::error("{} failed: {}", label, e.what());
      report.errors.push_back(fmt::format("{}: {}", label, e.what()));
      return false;
    }
  };

  DatasetSplit split;
  if (!stage("dataset", [&] { split = load_dataset(cfg.dataset); })) {
    report.finished_at = utc_timestamp();
    render_report(report, out);
    return report;
  }
  ArchitectureSpec arch;
  if (!stage("architecture", [&] { arch = resolve_architecture(cfg, split.train); })) {
    report.finished_at = utc_timestamp();
    render_report(report, out);
    return report;
  }
  const Dataset& test = split.test;
  const EvalConfig& ev = cfg.eval;
  const AttributionAttackConfig acfg = attack_config(ev);

  std::vector<std::optional<ModelBundle>> models(cfg.models.size());
  std::vector<double> train_seconds(cfg.models.size(), 0.0);
  for (std::size_t m = 0; m < cfg.models.size(); ++m) {
    const auto& entry = cfg.models[m];
    stage("train " + entry.name, [&] {
      ModelBundle model = ModelBundle::create(arch, cfg.seed);
      TrainOptions topt;
      topt.output_dir = out / entry.name;
      topt.resume = opts.resume;
      topt.eval = &test;
      topt.eval_samples = ev.accuracy_samples;
      spdlog::info("training {} ({}, {} epochs)", entry.name, to_string(entry.train.kind), entry.train.epochs);
      const auto res = train_model(model, split.train, entry.train, topt);
      for (const auto& r : res.history) train_seconds[m] += r.seconds;
      if (opts.on_model) opts.on_model(entry.name, model);
      models[m] = std::move(model);
    });
  }

  std::size_t source = 0;
  if (!ev.transfer_source.empty()) {
    for (std::size_t m = 0; m < cfg.models.size(); ++m) {
      if (cfg.models[m].name == ev.transfer_source) source = m;
    }
  }

  for (std::size_t m = 0; m < cfg.models.size(); ++m) {
    if (!models[m]) continue;
    const ModelBundle& model = *models[m];
    const auto& name = cfg.models[m].name;
    const auto& attacks = cfg.models[m].attacks ? *cfg.models[m].attacks : cfg.attacks;
    const fs::path dir = out / name;
    fs::create_directories(dir);
    std::vector<std::int64_t> indices;

    if (has(cfg.metrics, "accuracy") || has(attacks, "pgd")) {
      stage("accuracy " + name, [&] {
        const bool pgd = has(attacks, "pgd");
        const auto recs = evaluate_accuracy(model, test, ev.accuracy_samples, pgd ? &ev.pgd : nullptr,
                                            stage_seed(cfg.seed, "pgd"), ev.batch);
        std::vector<std::string> lines;
        for (const auto& r : recs) lines.push_back(fmt::format("{},{},{},{}", r.index, r.label, r.clean_pred, r.adv_pred));
        write_records(dir / "accuracy.csv", "index,label,clean_pred,adv_pred", lines);
      });
    }
    stage("select " + name, [&] { indices = correctly_classified(model, test, ev.samples); });
    const std::span<const std::int64_t> all(indices);

    if (has(attacks, "ifia")) {
      stage("ifia " + name, [&] {
        spdlog::info("IFIA on {} inputs of {}", indices.size(), name);
        const auto recs = evaluate_ifia(model, test, all, ev.ifia, acfg, ev.batch);
        std::vector<std::string> lines;
        for (const auto& r : recs) {
          lines.push_back(fmt::format("{},{},{},{},{}", r.index, r.label, num(r.topk), num(r.kendall), r.preserved ? 1 : 0));
        }
        write_records(dir / "ifia.csv", "index,label,topk,kendall,preserved", lines);
      });
    }
    if (has(cfg.metrics, "cosine")) {
      stage("cosine " + name, [&] {
        const auto recs = evaluate_cosine(model, test, all);
        std::vector<std::string> lines;
        for (const auto& r : recs) lines.push_back(fmt::format("{},{},{}", r.index, r.label, num(r.cosine)));
        write_records(dir / "cosine.csv", "index,label,cosine", lines);
      });
    }
    if (has(attacks, "eps_sweep")) {
      stage("eps_sweep " + name, [&] {
        const auto sub = all.first(std::min<std::size_t>(all.size(), static_cast<std::size_t>(std::max<std::int64_t>(ev.sweep_samples, 0))));
        std::vector<std::string> lines;
        for (double eps : ev.epsilons) {
          PerturbationBudget b = ev.ifia;
          b.epsilon = eps;
          for (const auto& r : evaluate_ifia(model, test, sub, b, acfg, ev.batch)) {
            lines.push_back(fmt::format("{},{},{},{},{},{}", num(eps), r.index, r.label, num(r.topk), num(r.kendall),
                                        r.preserved ? 1 : 0));
          }
        }
        write_records(dir / "eps_sweep.csv", "epsilon,index,label,topk,kendall,preserved", lines);
      });
    }
    if (has(attacks, "targeted")) {
      stage("targeted " + name, [&] {
        const auto sub = all.first(std::min<std::size_t>(all.size(), static_cast<std::size_t>(std::max<std::int64_t>(ev.targeted_pairs, 0))));
        const auto recs = evaluate_targeted(model, test, sub, ev.ifia, acfg, ev.batch);
        std::vector<std::string> lines;
        for (const auto& r : recs) {
          lines.push_back(fmt::format("{},{},{},{},{},{}", r.index, r.target_index, r.label, num(r.sim_target_before),
                                      num(r.sim_target_after), num(r.sim_original_after)));
        }
        write_records(dir / "targeted.csv", "index,target_index,label,sim_target_before,sim_target_after,sim_original_after",
                      lines);
      });
    }
    if (has(attacks, "spsa")) {
      stage("spsa " + name, [&] {
        const std::int64_t n = std::min(ev.spsa_samples, test.size());
        std::vector<std::string> lines;
        for_chunks(static_cast<std::size_t>(n), ev.batch, [&](std::size_t s, std::size_t e) {
          std::vector<std::int64_t> idx(e - s);
          std::iota(idx.begin(), idx.end(), static_cast<std::int64_t>(s));
          const auto y = labels_of(test, idx);
          const auto res = spsa_attack(model, images_of(test, idx), y, ev.pgd, ev.spsa, stage_seed(cfg.seed + s, "spsa"));
          const auto pred = predict(model, res.perturbed);
          for (std::size_t i = 0; i < idx.size(); ++i) lines.push_back(fmt::format("{},{},{}", idx[i], y[i], pred[i]));
        });
        write_records(dir / "spsa.csv", "index,label,adv_pred", lines);
      });
    }
    if (has(attacks, "transfer") && models[source]) {
      stage("transfer " + name, [&] {
        const std::int64_t n = std::min(ev.accuracy_samples > 0 ? ev.accuracy_samples : test.size(), test.size());
        std::vector<std::string> lines;
        for_chunks(static_cast<std::size_t>(n), ev.batch, [&](std::size_t s, std::size_t e) {
          std::vector<std::int64_t> idx(e - s);
          std::iota(idx.begin(), idx.end(), static_cast<std::int64_t>(s));
          const auto y = labels_of(test, idx);
          const auto res = pgd_attack(*models[source], images_of(test, idx), y, ev.pgd, splitmix(stage_seed(cfg.seed, "transfer") + s));
          const auto pred = predict(model, res.perturbed);
          for (std::size_t i = 0; i < idx.size(); ++i) lines.push_back(fmt::format("{},{},{}", idx[i], y[i], pred[i]));
        });
        write_records(dir / "transfer.csv", "index,label,adv_pred", lines);
      });
    }
    if (has(cfg.metrics, "wsol")) {
      stage("wsol " + name, [&] {
        if (test.boxes.empty()) throw InputError("dataset " + test.id + " has no bounding boxes");
        WsolConfig w;
        w.threshold = ev.wsol_threshold;
        w.max_images = ev.wsol_images;
        write_wsol_report(evaluate_wsol(model, test, w), dir / "wsol.csv");
      });
    }
  }

  if (has(cfg.metrics, "heatmaps")) {
    stage("heatmaps", [&] {
      std::vector<Tensor> images;
      std::vector<std::vector<Tensor>> maps;
      const std::int64_t n = std::min(ev.heatmap_samples, test.size());
      for (std::int64_t i = 0; i < n; ++i) {
        const Tensor x = test.image(i);
        const int y = test.labels[static_cast<std::size_t>(i)];
        images.push_back(x);
        std::vector<Tensor> row;
        for (const auto& model : models) {
          if (!model) continue;
          const Tensor xb = x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
          const std::vector<int> yy{y};
          const Tensor clean = batch_attributions(*model, xb, yy, acfg.evaluation, acfg.eval_mode);
          const auto res = ifia_topk_attack(*model, xb, yy, ev.ifia, acfg);
          const Tensor adv = batch_attributions(*model, res.perturbed, yy, acfg.evaluation, acfg.eval_mode);
          row.push_back(heatmap_postprocess(heatmap_grayscale(clean.reshaped(x.shape()))));
          row.push_back(heatmap_postprocess(heatmap_grayscale(adv.reshaped(x.shape()))));
        }
        maps.push_back(std::move(row));
      }
      write_png(out / "heatmaps.png", heatmap_grid(images, maps));
    });
  }

  for (std::size_t m = 0; m < cfg.models.size(); ++m) {
    ModelRow row = aggregate_records(out / cfg.models[m].name, cfg.models[m].name, to_string(cfg.models[m].train.kind));
    row.train_seconds = train_seconds[m];
    report.rows.push_back(std::move(row));
  }
  report.finished_at = utc_timestamp();
  stage("render", [&] { render_report(report, out); });
  return report;
}

}  // namespace art
