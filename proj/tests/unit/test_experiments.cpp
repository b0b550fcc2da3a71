#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "art/errors.hpp"
#include "art/experiments.hpp"
#include "art/io.hpp"
#include "art/plot.hpp"
#include "doctest.h"

using namespace art;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("art_test_experiments_" + name);
  fs::remove_all(p);
  return p;
}

ExperimentConfig tiny_config(const fs::path& out) {
  ExperimentConfig c;
  c.name = "tiny";
  c.dataset.id = "synthetic";
  c.dataset.train_size = 128;
  c.dataset.test_size = 40;
  c.dataset.seed = 3;
  c.dataset.synthetic.image_size = 16;
  c.dataset.synthetic.radius_lo = 3;
  c.dataset.synthetic.radius_hi = 6;
  TrainConfig t;
  t.epochs = 1;
  t.batch_size = 32;
  t.seed = 5;
  ModelEntry nat{"natural", t};
  nat.train.kind = TrainingKind::natural;
  ModelEntry art{"art", t};
  art.train.kind = TrainingKind::art;
  art.train.art.inner_budget.steps = 1;
  c.models = {nat, art};
  c.attacks = {"pgd", "ifia", "eps_sweep", "targeted", "spsa", "transfer"};
  c.metrics = {"accuracy", "cosine", "wsol", "heatmaps"};
  c.eval.samples = 4;
  c.eval.accuracy_samples = 12;
  c.eval.k = 20;
  c.eval.ifia.steps = 2;
  c.eval.pgd.steps = 3;
  c.eval.attack_ig_steps = 2;
  c.eval.eval_ig_steps = 4;
  c.eval.sweep_samples = 2;
  c.eval.targeted_pairs = 4;
  c.eval.spsa_samples = 2;
  c.eval.spsa.batch_perturbations = 4;
  c.eval.wsol_images = 10;
  c.eval.heatmap_samples = 2;
  c.eval.batch = 8;
  c.seed = 11;
  c.output_dir = out;
  return c;
}

// Independent CSV parsing and aggregation.
std::vector<std::map<std::string, std::string>> parse(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) header.push_back(c);
  }
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(in, line)) {
    std::map<std::string, std::string> row;
    std::size_t start = 0;
    for (const auto& h : header) {
      std::size_t end = line.find(',', start);
      row[h] = line.substr(start, end == std::string::npos ? std::string::npos : end - start);
      start = end == std::string::npos ? line.size() : end + 1;
    }
    rows.push_back(row);
  }
  return rows;
}

double mean_of(const std::vector<std::map<std::string, std::string>>& rows, const std::string& col) {
  double s = 0;
  int n = 0;
  for (const auto& r : rows) {
    if (r.at(col) == "nan") continue;
    s += std::stod(r.at(col));
    ++n;
  }
  return s / n;
}

double share(const std::vector<std::map<std::string, std::string>>& rows, const std::string& a, const std::string& b) {
  double hits = 0;
  for (const auto& r : rows) hits += r.at(a) == r.at(b);
  return hits / static_cast<double>(rows.size());
}

std::vector<std::string> files_in(const fs::path& dir, const std::string& ext) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.path().extension() == ext) out.push_back(fs::relative(e.path(), dir).string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Wall-clock columns are the only permitted difference between reruns.
std::string without_timing(const fs::path& p) {
  const auto rows = parse(p);
  std::string out;
  for (const auto& r : rows)
    for (const auto& [k, v] : r)
      if (k != "seconds") out += k + "=" + v + ";";
  return out;
}

bool image_has_color(const Image& img, Rgb c) {
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (img.at(x, y) == c) return true;
  return false;
}

}  // namespace

TEST_CASE("experiment config json round trip and validation") {
  ExperimentConfig c = preset_natural_pgd_art();
  c.eval.epsilons = {1.0 / 255.0, 3.0 / 255.0};
  c.dataset.synthetic.noise = 0.07;
  c.models[2].attacks = std::vector<std::string>{"ifia", "eps_sweep"};
  const nlohmann::json j = c;
  const auto back = j.get<ExperimentConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(config_hash(back) == config_hash(c));
  CHECK(back.models.size() == 3);
  CHECK(back.models[1].train.kind == TrainingKind::pgd_adversarial);
  CHECK(back.normalize_inputs);
  CHECK_FALSE(back.models[0].attacks.has_value());
  CHECK(back.models[2].attacks == std::vector<std::string>{"ifia", "eps_sweep"});

  ExperimentConfig moved = c;
  moved.output_dir = "elsewhere";
  CHECK(config_hash(moved) == config_hash(c));
  ExperimentConfig changed = c;
  changed.eval.k = 50;
  CHECK(config_hash(changed) != config_hash(c));

  nlohmann::json bad = j;
  bad["attacks"] = {"pgd", "nonsense"};
  CHECK_THROWS_AS(bad.get<ExperimentConfig>(), InputError);
  bad = j;
  bad["models"][1]["name"] = "natural";
  CHECK_THROWS_AS(bad.get<ExperimentConfig>(), InputError);
  bad = j;
  bad["models"][0]["attacks"] = {"nonsense"};
  CHECK_THROWS_AS(bad.get<ExperimentConfig>(), InputError);
  bad = j;
  bad["eval"]["k"] = 0;
  CHECK_THROWS_AS(bad.get<ExperimentConfig>(), InputError);

  const fs::path dir = scratch("cfg");
  fs::create_directories(dir);
  write_file_atomic(dir / "c.json", j.dump());
  CHECK(nlohmann::json(load_experiment_config(dir / "c.json")) == j);
  CHECK_THROWS_AS(load_experiment_config(dir / "missing.json"), PathError);
  write_file_atomic(dir / "broken.json", "{ not json");
  CHECK_THROWS_AS(load_experiment_config(dir / "broken.json"), InputError);
  fs::remove_all(dir);
}

TEST_CASE("run_experiment persists traceable records and is deterministic") {
  const fs::path a = scratch("run_a"), b = scratch("run_b");
  const ExperimentConfig cfg = tiny_config(a);
  const RobustnessReport rep = run_experiment(cfg);
  CHECK(rep.errors.empty());
  for (const auto& e : rep.errors) MESSAGE(e);
  REQUIRE(rep.rows.size() == cfg.models.size());
  CHECK(rep.config_hash == config_hash(cfg));
  CHECK_FALSE(rep.git_describe.empty());
  CHECK_FALSE(rep.started_at.empty());

  for (const auto& row : rep.rows) {
    const fs::path dir = a / row.name;
    const auto acc = parse(dir / "accuracy.csv");
    CHECK(acc.size() == 12);
    CHECK(*row.natural_acc == doctest::Approx(share(acc, "label", "clean_pred")).epsilon(1e-15));
    CHECK(*row.pgd40_acc == doctest::Approx(share(acc, "label", "adv_pred")).epsilon(1e-15));

    const auto ifia = parse(dir / "ifia.csv");
    CHECK(ifia.size() == row.ifia_topk_samples.size());
    CHECK(*row.ifia_topk == doctest::Approx(mean_of(ifia, "topk")).epsilon(1e-12));
    CHECK(*row.ifia_kendall == doctest::Approx(mean_of(ifia, "kendall")).epsilon(1e-12));
    for (const auto& r : ifia) CHECK(r.at("preserved") == "1");

    CHECK(*row.cosine_mean == doctest::Approx(mean_of(parse(dir / "cosine.csv"), "cosine")).epsilon(1e-12));

    const auto sweep = parse(dir / "eps_sweep.csv");
    REQUIRE(row.eps_sweep.size() == cfg.eval.epsilons.size());
    for (std::size_t e = 0; e < cfg.eval.epsilons.size(); ++e) {
      std::vector<std::map<std::string, std::string>> at;
      for (const auto& r : sweep)
        if (std::stod(r.at("epsilon")) == cfg.eval.epsilons[e]) at.push_back(r);
      CHECK(row.eps_sweep[e].epsilon == cfg.eval.epsilons[e]);
      CHECK(row.eps_sweep[e].topk == doctest::Approx(mean_of(at, "topk")).epsilon(1e-12));
    }

    const auto tgt = parse(dir / "targeted.csv");
    double moved = 0;
    for (const auto& r : tgt) moved += std::stod(r.at("sim_target_after")) > std::stod(r.at("sim_target_before"));
    CHECK(*row.targeted_success == doctest::Approx(moved / tgt.size()));
    CHECK(*row.targeted_sim_original == doctest::Approx(mean_of(tgt, "sim_original_after")).epsilon(1e-12));

    CHECK(*row.spsa_acc == doctest::Approx(share(parse(dir / "spsa.csv"), "label", "adv_pred")));
    CHECK(*row.transfer_acc == doctest::Approx(share(parse(dir / "transfer.csv"), "label", "adv_pred")));

    const auto ws = parse(dir / "wsol.csv");
    double known = 0;
    for (const auto& r : ws) known += std::stod(r.at("iou")) >= 0.5;
    CHECK(*row.wsol_gt_known == doctest::Approx(known / ws.size()));

    const ModelRow again = aggregate_records(dir, row.name, row.kind);
    CHECK(nlohmann::json(again)["ifia_topk"] == nlohmann::json(row)["ifia_topk"]);
  }

  // the report on disk carries the same numbers
  const auto disk = nlohmann::json::parse(read_file(a / "report.json")).get<RobustnessReport>();
  CHECK(nlohmann::json(disk.rows) == nlohmann::json(rep.rows));
  for (const auto* f : {"summary.csv", "eps_sweep_topk.png", "eps_sweep_kendall.png", "ifia_topk_box.png",
                        "ifia_kendall_box.png", "cosine_box.png", "heatmaps.png", "config.json"}) {
    CHECK_MESSAGE(fs::exists(a / f), f);
  }

  ExperimentConfig cfg_b = cfg;
  cfg_b.output_dir = b;
  const RobustnessReport rep_b = run_experiment(cfg_b);
  CHECK(rep_b.config_hash == rep.config_hash);
  const auto csvs = files_in(a, ".csv");
  CHECK(csvs == files_in(b, ".csv"));
  CHECK(csvs.size() >= 2 * 8 + 1);
  for (const auto& f : csvs) {
    const bool timed = fs::path(f).filename() == "metrics.csv";
    const bool same = timed ? without_timing(a / f) == without_timing(b / f) : read_file(a / f) == read_file(b / f);
    CHECK_MESSAGE(same, f);
  }
  for (const auto& f : files_in(a, ".png")) {
    const bool same = read_file(a / f) == read_file(b / f);
    CHECK_MESSAGE(same, f);
  }

  // rerun in place loads the checkpoints and reproduces the records
  const std::string before = read_file(a / "art" / "ifia.csv");
  const RobustnessReport rerun = run_experiment(cfg);
  CHECK(read_file(a / "art" / "ifia.csv") == before);
  CHECK(nlohmann::json(rerun.rows) == nlohmann::json(rep.rows));

  ExperimentConfig other = cfg;
  other.eval.k = 10;
  CHECK_THROWS_AS(run_experiment(other), ConfigMismatchError);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("architecture normalization comes from the training split") {
  ExperimentConfig cfg;
  const Dataset train = make_synthetic(20, 3);
  const ArchitectureSpec a = resolve_architecture(cfg, train);
  CHECK(a.norm_mean == channel_stats(train).mean);
  CHECK(a.norm_std == channel_stats(train).std);
  CHECK(a.num_classes == train.num_classes);
  cfg.architecture.norm_mean = {0.5, 0.5, 0.5};
  cfg.architecture.norm_std = {0.25, 0.25, 0.25};
  CHECK(resolve_architecture(cfg, train).norm_mean == cfg.architecture.norm_mean);
  cfg = ExperimentConfig{};
  cfg.normalize_inputs = false;
  CHECK(resolve_architecture(cfg, train).norm_mean.empty());
}

TEST_CASE("per-model attack lists override the experiment list") {
  const fs::path dir = scratch("override");
  ExperimentConfig cfg = tiny_config(dir);
  cfg.attacks = {"pgd"};
  cfg.metrics = {"accuracy"};
  cfg.models[1].attacks = std::vector<std::string>{"ifia"};
  const auto rep = run_experiment(cfg);
  CHECK(rep.errors.empty());
  CHECK(rep.rows[0].pgd40_acc.has_value());
  CHECK_FALSE(rep.rows[0].ifia_topk.has_value());
  CHECK_FALSE(rep.rows[1].pgd40_acc.has_value());
  CHECK(fs::exists(dir / "art" / "ifia.csv"));
  CHECK_FALSE(fs::exists(dir / "natural" / "ifia.csv"));
  fs::remove_all(dir);
}

TEST_CASE("empty suite lists give tables only") {
  const fs::path dir = scratch("tables");
  ExperimentConfig cfg = tiny_config(dir);
  cfg.models.resize(1);
  cfg.attacks.clear();
  cfg.metrics.clear();
  const auto rep = run_experiment(cfg);
  CHECK(rep.rows.size() == 1);
  CHECK(rep.errors.empty());
  CHECK(fs::exists(dir / "summary.csv"));
  CHECK(fs::exists(dir / "report.json"));
  CHECK(files_in(dir, ".png").empty());
  CHECK_FALSE(rep.rows[0].natural_acc.has_value());
  fs::remove_all(dir);
}

TEST_CASE("a failing stage is summarized and other outputs remain") {
  const fs::path dir = scratch("partial");
  ExperimentConfig cfg = tiny_config(dir);
  cfg.models.resize(1);
  cfg.attacks = {"pgd"};
  cfg.metrics = {"accuracy", "wsol"};
  cfg.dataset.id = "no_such_dataset";
  cfg.dataset.root = dir / "absent";
  auto rep = run_experiment(cfg);
  REQUIRE(rep.errors.size() == 1);
  CHECK(rep.errors[0].rfind("dataset:", 0) == 0);
  CHECK(fs::exists(dir / "report.json"));
  fs::remove_all(dir);

  // a suite that cannot run on this data fails alone
  cfg = tiny_config(dir);
  cfg.models.resize(1);
  cfg.attacks = {"pgd"};
  cfg.metrics = {"accuracy", "wsol"};
  cfg.eval.wsol_threshold = 2.0;
  rep = run_experiment(cfg);
  REQUIRE(rep.errors.size() == 1);
  CHECK(rep.errors[0].rfind("wsol natural:", 0) == 0);
  CHECK(rep.rows[0].natural_acc.has_value());
  CHECK(rep.rows[0].pgd40_acc.has_value());
  fs::remove_all(dir);
}

TEST_CASE("box statistics") {
  const auto s = box_stats({1, 2, 3, 4, 5, 6, 7, 8, 9, 100});
  CHECK(s.median == doctest::Approx(5.5));
  CHECK(s.q1 == doctest::Approx(3.25));
  CHECK(s.q3 == doctest::Approx(7.75));
  CHECK(s.low == 1);
  CHECK(s.high == 9);
  REQUIRE(s.outliers.size() == 1);
  CHECK(s.outliers[0] == 100);
  const auto one = box_stats({2.0, std::nan("")});
  CHECK(one.median == 2.0);
  CHECK(one.low == 2.0);
  CHECK(one.high == 2.0);
}

TEST_CASE("rendered plots are deterministic with one series per model") {
  RobustnessReport rep;
  rep.name = "plots";
  for (int m = 0; m < 3; ++m) {
    ModelRow r;
    r.name = "model" + std::to_string(m);
    for (double e : {2.0, 4.0, 8.0, 12.0}) r.eps_sweep.push_back({e / 255.0, 0.9 - 0.05 * e * (m + 1) / 12.0, 0.5});
    r.ifia_topk_samples = {0.2 + 0.1 * m, 0.4, 0.5, 0.9};
    r.ifia_kendall_samples = {0.1, 0.2, 0.3, 0.4};
    rep.rows.push_back(r);
  }
  const fs::path a = scratch("plots_a"), b = scratch("plots_b");
  render_report(rep, a);
  render_report(rep, b);
  for (const auto& f : files_in(a, ".png")) CHECK(read_file(a / f) == read_file(b / f));
  const Image sweep = read_png(a / "eps_sweep_topk.png");
  for (std::size_t m = 0; m < 3; ++m) CHECK(image_has_color(sweep, series_color(m)));
  CHECK_FALSE(image_has_color(sweep, series_color(3)));
  CHECK_FALSE(fs::exists(a / "cosine_box.png"));
  const auto back = nlohmann::json::parse(read_file(a / "report.json")).get<RobustnessReport>();
  REQUIRE(back.rows.size() == 3);
  CHECK(back.rows[2].eps_sweep[3].epsilon * 255.0 == doctest::Approx(12.0));
  fs::remove_all(a);
  fs::remove_all(b);
}
