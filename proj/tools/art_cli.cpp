// Command-line front end: train, attack-attr, attack-adv, eval-wsol, report, sweep.

#include <CLI11.hpp>
#include <filesystem>
#include <fmt/format.h>
#include <numeric>
#include <spdlog/spdlog.h>

#include "art/errors.hpp"
#include "art/experiments.hpp"
#include "art/io.hpp"
#include "art/wsol.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace art;

namespace {

struct Flags {
  std::string config;
  std::string preset;
  std::string dataset = "synthetic";
  std::string data_root;
  std::int64_t train_size = 10000;
  std::int64_t test_size = 1000;
  std::uint64_t seed = 0;
  std::string out = "runs/experiment";

  std::string name = "model";
  std::string kind = "art";
  int epochs = 10;
  int warmup_epochs = 0;
  std::int64_t batch_size = 64;
  double lr = 0.05;
  double lambda = 0.5;
  double beta = 50.0;
  int inner_steps = 3;
  double inner_eps = 8.0;
  std::string loss_variant = "art_triplet";
  int pgd_steps = 7;

  std::string checkpoint;
  std::string source;
  std::int64_t samples = 200;
  std::int64_t k = 100;
  double eps = 8.0;
  int steps = 50;
  double step_size = 1.0;
  std::string method = "integrated_gradients";
  int attack_ig_steps = 10;
  int eval_ig_steps = 50;
  bool targeted = false;
  std::string attack = "pgd";
  std::string manifest;
  double threshold = 0.2;
  std::string overlays;
  std::string from;
  std::string param = "lambda";
  std::vector<double> values;
};

void add_common(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "JSON experiment config; its fields override flags");
  app->add_option("--dataset", f.dataset, "synthetic | cifar10 | gtsrb | <npy directory name>");
  app->add_option("--data-root", f.data_root, "dataset root (default: $ART_DATA_ROOT, then ./data)");
  app->add_option("--train-size", f.train_size);
  app->add_option("--test-size", f.test_size);
  app->add_option("--seed", f.seed);
  app->add_option("--out", f.out, "output directory");
}

void add_training(CLI::App* app, Flags& f) {
  app->add_option("--name", f.name, "model name");
  app->add_option("--kind", f.kind, "natural | pgd_adversarial | art");
  app->add_option("--epochs", f.epochs);
  app->add_option("--warmup-epochs", f.warmup_epochs, "natural epochs before ART");
  app->add_option("--batch-size", f.batch_size);
  app->add_option("--lr", f.lr);
  app->add_option("--lambda", f.lambda);
  app->add_option("--beta", f.beta);
  app->add_option("--inner-steps", f.inner_steps, "ART inner ascent steps (a)");
  app->add_option("--inner-eps", f.inner_eps, "ART inner radius in 1/255 units");
  app->add_option("--loss-variant", f.loss_variant);
  app->add_option("--pgd-steps", f.pgd_steps, "PGD steps for adversarial training");
}

void add_attack(CLI::App* app, Flags& f) {
  app->add_option("--checkpoint", f.checkpoint, "trained model")->required();
  app->add_option("--samples", f.samples);
  app->add_option("--eps", f.eps, "radius in 1/255 units");
  app->add_option("--steps", f.steps);
  app->add_option("--step-size", f.step_size, "in 1/255 units");
}

json flags_config(const Flags& f) {
  ExperimentConfig c;
  c.name = f.name;
  c.dataset.id = f.dataset;
  c.dataset.root = f.data_root;
  c.dataset.train_size = f.train_size;
  c.dataset.test_size = f.test_size;
  c.dataset.seed = f.seed;
  c.seed = f.seed;
  c.output_dir = f.out;
  TrainConfig t;
  t.kind = training_kind_from_string(f.kind);
  t.epochs = f.epochs;
  t.warmup_epochs = f.warmup_epochs;
  t.batch_size = f.batch_size;
  t.schedule.base_lr = f.lr;
  t.seed = f.seed;
  t.art.lambda = f.lambda;
  t.art.beta = f.beta;
  t.art.inner_budget.steps = f.inner_steps;
  t.art.inner_budget.epsilon = f.inner_eps / 255.0;
  t.art.loss_variant = loss_variant_from_string(f.loss_variant);
  t.pgd.steps = f.pgd_steps;
  c.models = {{f.name, t}};
  c.eval.samples = f.samples;
  c.eval.k = f.k;
  c.eval.method = attribution_method_from_string(f.method);
  c.eval.attack_ig_steps = f.attack_ig_steps;
  c.eval.eval_ig_steps = f.eval_ig_steps;
  c.eval.wsol_threshold = f.threshold;
  return c;
}

ExperimentConfig resolve(const Flags& f) {
  json j = f.preset == "natural_pgd_art" ? json(preset_natural_pgd_art()) : flags_config(f);
  if (!f.preset.empty() && f.preset != "natural_pgd_art") throw InputError("unknown preset: " + f.preset);
  if (!f.preset.empty()) {
    j["output_dir"] = f.out;
    j["seed"] = f.seed;
    j["dataset"] = flags_config(f)["dataset"];
  }
  if (!f.config.empty()) {
    if (!fs::exists(f.config)) throw PathError("config file not found: " + f.config);
    j.merge_patch(json::parse(read_file(f.config)));
  }
  return j.get<ExperimentConfig>();
}

ModelBundle load_model(const std::string& path) { return load_checkpoint(path).model; }

PerturbationBudget attack_budget(const Flags& f, bool random_init) {
  return {Norm::linf, f.eps / 255.0, f.step_size / 255.0, f.steps, random_init, 0.0, 1.0};
}

void print_row(const ModelRow& r) {
  auto v = [](const std::optional<double>& x) { return x ? fmt::format("{:.4f}", *x) : std::string("-"); };
  fmt::print("{:<12} {:<16} clean {}  pgd {}  IN {}  K {}  cos {}\n", r.name, r.kind, v(r.natural_acc), v(r.pgd40_acc),
             v(r.ifia_topk), v(r.ifia_kendall), v(r.cosine_mean));
}

int cmd_train(const Flags& f) {
  const ExperimentConfig cfg = resolve(f);
  const DatasetSplit split = load_dataset(cfg.dataset);
  const ArchitectureSpec arch = resolve_architecture(cfg, split.train);
  for (const auto& m : cfg.models) {
    ModelBundle model = ModelBundle::create(arch, cfg.seed);
    TrainOptions opts;
    opts.output_dir = cfg.output_dir / m.name;
    opts.eval = &split.test;
    opts.eval_samples = cfg.eval.accuracy_samples;
    const auto res = train_model(model, split.train, m.train, opts);
    if (!res.history.empty()) {
      fmt::print("{}: {} epochs, test accuracy {:.4f}, checkpoint {}\n", m.name, res.history.size(),
                 res.history.back().test_accuracy, (opts.output_dir / "checkpoint.bin").string());
    }
  }
  return 0;
}

int cmd_attack_attr(const Flags& f) {
  const ExperimentConfig cfg = resolve(f);
  const ModelBundle model = load_model(f.checkpoint);
  const DatasetSplit split = load_dataset(cfg.dataset);
  const auto idx = correctly_classified(model, split.test, cfg.eval.samples);
  const auto acfg = attack_config(cfg.eval);
  const PerturbationBudget b = attack_budget(f, false);
  fs::create_directories(cfg.output_dir);
  std::string csv;
  if (f.targeted) {
    const auto recs = evaluate_targeted(model, split.test, idx, b, acfg, cfg.eval.batch);
    csv = "index,target_index,label,sim_target_before,sim_target_after,sim_original_after\n";
    double moved = 0, orig = 0;
    for (const auto& r : recs) {
      csv += fmt::format("{},{},{},{},{},{}\n", r.index, r.target_index, r.label, r.sim_target_before, r.sim_target_after,
                         r.sim_original_after);
      moved += r.sim_target_after > r.sim_target_before;
      orig += r.sim_original_after;
    }
    const double n = std::max<double>(1, static_cast<double>(recs.size()));
    fmt::print("targeted: {} pairs, moved toward target {:.4f}, similarity to original {:.4f}\n", recs.size(), moved / n,
               orig / n);
    write_file_atomic(cfg.output_dir / "targeted.csv", csv);
  } else {
    const auto recs = evaluate_ifia(model, split.test, idx, b, acfg, cfg.eval.batch);
    csv = "index,label,topk,kendall,preserved\n";
    double in = 0, kt = 0;
    for (const auto& r : recs) {
      csv += fmt::format("{},{},{},{},{}\n", r.index, r.label, r.topk, r.kendall, r.preserved ? 1 : 0);
      in += r.topk;
      kt += r.kendall;
    }
    const double n = std::max<double>(1, static_cast<double>(recs.size()));
    fmt::print("IFIA: {} inputs, top-{} intersection {:.4f}, kendall {:.4f}\n", recs.size(), cfg.eval.k, in / n, kt / n);
    write_file_atomic(cfg.output_dir / "ifia.csv", csv);
  }
  return 0;
}

int cmd_attack_adv(const Flags& f) {
  const ExperimentConfig cfg = resolve(f);
  const ModelBundle model = load_model(f.checkpoint);
  const DatasetSplit split = load_dataset(cfg.dataset);
  const std::int64_t n = std::min(f.samples, split.test.size());
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  const Dataset sub = split.test.subset(idx);
  const PerturbationBudget b = attack_budget(f, true);
  double acc = 0;
  if (f.attack == "pgd") {
    acc = accuracy(model, pgd_attack(model, sub.images, sub.labels, b, cfg.seed).perturbed, sub.labels);
  } else if (f.attack == "spsa") {
    acc = accuracy(model, spsa_attack(model, sub.images, sub.labels, b, cfg.eval.spsa, cfg.seed).perturbed, sub.labels);
  } else if (f.attack == "transfer") {
    if (f.source.empty()) throw InputError("transfer needs --source <checkpoint>");
    acc = transfer_attack_eval(load_model(f.source), model, sub.images, sub.labels, b, cfg.seed);
  } else {
    throw InputError("unknown attack: " + f.attack);
  }
  fmt::print("{}: clean accuracy {:.4f}, adversarial accuracy {:.4f} on {} inputs (eps {}/255, {} steps)\n", f.attack,
             accuracy(model, sub.images, sub.labels), acc, n, f.eps, f.steps);
  return 0;
}

int cmd_eval_wsol(const Flags& f) {
  const ExperimentConfig cfg = resolve(f);
  const ModelBundle model = load_model(f.checkpoint);
  Dataset data = f.manifest.empty() ? load_dataset(cfg.dataset).test : load_manifest_dataset(f.manifest, model.num_classes());
  WsolConfig w;
  w.threshold = cfg.eval.wsol_threshold;
  w.attribution.method = attribution_method_from_string(f.method);
  w.attribution.ig.riemann_steps = cfg.eval.eval_ig_steps;
  w.max_images = f.samples;
  const auto rep = evaluate_wsol(model, data, w, f.overlays);
  fs::create_directories(cfg.output_dir);
  write_wsol_report(rep, cfg.output_dir / "wsol.csv");
  fmt::print("WSOL: {} images, GT-known {:.4f}, top-1 loc {:.4f}, top-1 cls {:.4f}", rep.records.size(),
             rep.metrics.gt_known_loc, rep.metrics.top1_loc, rep.metrics.top1_acc);
  if (rep.top1_seg) fmt::print(", top-1 seg {:.4f}", *rep.top1_seg);
  fmt::print("\n");
  return 0;
}

int cmd_report(const Flags& f) {
  if (!f.from.empty()) {
    const fs::path dir = f.from;
    const auto rep = json::parse(read_file(dir / "report.json")).get<RobustnessReport>();
    render_report(rep, dir);
    for (const auto& r : rep.rows) print_row(r);
    return 0;
  }
  const auto rep = run_experiment(resolve(f));
  for (const auto& r : rep.rows) print_row(r);
  for (const auto& e : rep.errors) fmt::print(stderr, "error: {}\n", e);
  return rep.errors.empty() ? 0 : 1;
}

int cmd_sweep(const Flags& f) {
  if (f.values.empty()) throw InputError("sweep needs --values");
  const ExperimentConfig base = resolve(f);
  std::string csv = "param,value,model,natural_acc,pgd40_acc,ifia_topk,ifia_kendall,cosine_mean\n";
  int status = 0;
  for (double v : f.values) {
    ExperimentConfig c = base;
    c.output_dir = base.output_dir / fmt::format("{}_{}", f.param, v);
    for (auto& m : c.models) {
      if (m.train.kind != TrainingKind::art) continue;
      if (f.param == "lambda") m.train.art.lambda = v;
      else if (f.param == "beta") m.train.art.beta = v;
      else if (f.param == "inner_steps") m.train.art.inner_budget.steps = static_cast<int>(v);
      else if (f.param != "eps") throw InputError("unknown sweep parameter: " + f.param);
    }
    if (f.param == "eps") c.eval.ifia.epsilon = v / 255.0;
    const auto rep = run_experiment(c);
    auto cell = [](const std::optional<double>& x) { return x ? fmt::format("{:.6f}", *x) : std::string{}; };
    for (const auto& r : rep.rows) {
      csv += fmt::format("{},{},{},{},{},{},{},{}\n", f.param, v, r.name, cell(r.natural_acc), cell(r.pgd40_acc),
                         cell(r.ifia_topk), cell(r.ifia_kendall), cell(r.cosine_mean));
      fmt::print("{}={} ", f.param, v);
      print_row(r);
    }
    if (!rep.errors.empty()) status = 1;
  }
  fs::create_directories(base.output_dir);
  write_file_atomic(base.output_dir / fmt::format("sweep_{}.csv", f.param), csv);
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attributional robustness training and evaluation"};
  app.require_subcommand(1);
  Flags f;

  auto* train = app.add_subcommand("train", "train models");
  add_common(train, f);
  add_training(train, f);

  auto* attr = app.add_subcommand("attack-attr", "attribution attacks (IFIA top-k or targeted)");
  add_common(attr, f);
  add_attack(attr, f);
  attr->add_option("--k", f.k);
  attr->add_option("--method", f.method, "gradient | integrated_gradients | gradshap");
  attr->add_option("--attack-ig-steps", f.attack_ig_steps);
  attr->add_option("--eval-ig-steps", f.eval_ig_steps);
  attr->add_flag("--targeted", f.targeted);

  auto* adv = app.add_subcommand("attack-adv", "adversarial accuracy under PGD, SPSA or transfer");
  add_common(adv, f);
  add_attack(adv, f);
  adv->add_option("--attack", f.attack, "pgd | spsa | transfer");
  adv->add_option("--source", f.source, "source checkpoint for transfer");

  auto* wsol = app.add_subcommand("eval-wsol", "weakly supervised localization");
  add_common(wsol, f);
  wsol->add_option("--checkpoint", f.checkpoint)->required();
  wsol->add_option("--manifest", f.manifest, "CSV manifest with boxes (default: dataset test split)");
  wsol->add_option("--threshold", f.threshold);
  wsol->add_option("--method", f.method);
  wsol->add_option("--samples", f.samples, "images to evaluate (0: all)");
  wsol->add_option("--overlays", f.overlays, "directory for overlay PNGs");

  auto* report = app.add_subcommand("report", "run an experiment and render its report");
  add_common(report, f);
  add_training(report, f);
  report->add_option("--preset", f.preset, "natural_pgd_art");
  report->add_option("--from", f.from, "re-render an existing output directory");

  auto* sweep = app.add_subcommand("sweep", "grid over lambda, beta, inner_steps or eps");
  add_common(sweep, f);
  add_training(sweep, f);
  sweep->add_option("--preset", f.preset, "natural_pgd_art");
  sweep->add_option("--param", f.param, "lambda | beta | inner_steps | eps (1/255 units)");
  sweep->add_option("--values", f.values)->delimiter(',');

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(f);
    if (*attr) return cmd_attack_attr(f);
    if (*adv) return cmd_attack_adv(f);
    if (*wsol) return cmd_eval_wsol(f);
    if (*report) return cmd_report(f);
    if (*sweep) return cmd_sweep(f);
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 0;
}
