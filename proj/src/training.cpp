#include "art/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fmt/format.h>
#include <numeric>
#include <spdlog/spdlog.h>

#include "art/errors.hpp"
#include "art/io.hpp"

namespace art {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(TrainingKind k) {
  switch (k) {
    case TrainingKind::natural: return "natural";
    case TrainingKind::pgd_adversarial: return "pgd_adversarial";
    case TrainingKind::art: return "art";
  }
  return "?";
}

TrainingKind training_kind_from_string(const std::string& s) {
  for (auto k : {TrainingKind::natural, TrainingKind::pgd_adversarial, TrainingKind::art}) {
    if (to_string(k) == s) return k;
  }
  throw InputError("unknown training kind: " + s);
}

void to_json(json& j, const PerturbationBudget& b) {
  j = {{"norm", to_string(b.norm)}, {"epsilon", b.epsilon},         {"step_size", b.step_size},
       {"steps", b.steps},          {"random_init", b.random_init}, {"lower", b.lower},
       {"upper", b.upper}};
}

void from_json(const json& j, PerturbationBudget& b) {
  b = PerturbationBudget{};
  b.norm = norm_from_string(j.value("norm", to_string(b.norm)));
  b.epsilon = j.value("epsilon", b.epsilon);
  b.step_size = j.value("step_size", b.step_size);
  b.steps = j.value("steps", b.steps);
  b.random_init = j.value("random_init", b.random_init);
  b.lower = j.value("lower", b.lower);
  b.upper = j.value("upper", b.upper);
}

void to_json(json& j, const ARTConfig& c) {
  j = {{"lambda", c.lambda},
       {"beta", c.beta},
       {"inner_budget", c.inner_budget},
       {"loss_variant", to_string(c.loss_variant)},
       {"channel_mean", c.channel_mean},
       {"inner_loss", c.inner_loss == InnerLoss::l_attr ? "l_attr" : "l_attr_plus_ce"}};
}

void from_json(const json& j, ARTConfig& c) {
  c = ARTConfig{};
  c.lambda = j.value("lambda", c.lambda);
  c.beta = j.value("beta", c.beta);
  if (j.contains("inner_budget")) c.inner_budget = j.at("inner_budget").get<PerturbationBudget>();
  c.loss_variant = loss_variant_from_string(j.value("loss_variant", to_string(c.loss_variant)));
  c.channel_mean = j.value("channel_mean", c.channel_mean);
  const std::string il = j.value("inner_loss", "l_attr");
  if (il != "l_attr" && il != "l_attr_plus_ce") throw InputError("unknown inner loss: " + il);
  c.inner_loss = il == "l_attr" ? InnerLoss::l_attr : InnerLoss::l_attr_plus_ce;
  if (c.lambda < 0) throw InputError("lambda must be nonnegative");
  if (c.beta <= 0) throw InputError("beta must be positive");
}

void to_json(json& j, const TrainConfig& c) {
  j = {{"kind", to_string(c.kind)},
       {"art", c.art},
       {"pgd", c.pgd},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"warmup_epochs", c.warmup_epochs},
       {"sgd", {{"lr", c.sgd.lr}, {"momentum", c.sgd.momentum}, {"weight_decay", c.sgd.weight_decay}}},
       {"schedule", {{"base_lr", c.schedule.base_lr}, {"milestones", c.schedule.milestones}, {"factors", c.schedule.factors}}},
       {"crop_pad", c.crop_pad},
       {"flip", c.flip},
       {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.kind = training_kind_from_string(j.value("kind", to_string(c.kind)));
  if (j.contains("art")) c.art = j.at("art").get<ARTConfig>();
  if (j.contains("pgd")) c.pgd = j.at("pgd").get<PerturbationBudget>();
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  if (j.contains("sgd")) {
    const auto& s = j.at("sgd");
    c.sgd.lr = s.value("lr", c.sgd.lr);
    c.sgd.momentum = s.value("momentum", c.sgd.momentum);
    c.sgd.weight_decay = s.value("weight_decay", c.sgd.weight_decay);
  }
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    c.schedule.base_lr = s.value("base_lr", c.schedule.base_lr);
    c.schedule.milestones = s.value("milestones", c.schedule.milestones);
    c.schedule.factors = s.value("factors", c.schedule.factors);
  }
  c.crop_pad = j.value("crop_pad", c.crop_pad);
  c.flip = j.value("flip", c.flip);
  c.seed = j.value("seed", c.seed);
  if (c.epochs < 0 || c.batch_size <= 0) throw InputError("epochs must be >= 0 and batch_size > 0");
  if (c.schedule.milestones.size() != c.schedule.factors.size()) {
    throw InputError("schedule milestones and factors differ in length");
  }
}

std::string config_hash(const TrainConfig& cfg) { return fnv1a_hex(json(cfg).dump()); }

namespace {

Shape batched(const ModelBundle& model, const Tensor& x, std::span<const int> y) {
  Shape s = model.batch_shape(x.shape());
  if (s[0] != static_cast<std::int64_t>(y.size())) {
    throw InputError(fmt::format("{} labels for a batch of {}", y.size(), s[0]));
  }
  return s;
}

double batch_accuracy(const Tensor& logits, std::span<const int> y) {
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  int correct = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    correct += argmax(logits.data().subspan(static_cast<std::size_t>(i * k), static_cast<std::size_t>(k))) ==
               y[static_cast<std::size_t>(i)];
  }
  return n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
}

void check_finite(double total, const StepStats& s, double lr, const OptimizerState& state) {
  if (std::isfinite(total)) return;
  throw NonFiniteLossError(fmt::format("non-finite loss at optimizer step {}: total={} ce={} attr={} d_pos={} d_neg={} lr={}",
                                       state.steps, total, s.ce, s.attr, s.d_pos, s.d_neg, lr));
}

std::vector<Tensor> values_of(const std::vector<ag::Var>& vars) {
  std::vector<Tensor> out;
  out.reserve(vars.size());
  for (const auto& v : vars) out.push_back(v.value());
  return out;
}

StepStats ce_step(ModelBundle& model, const Tensor& x, std::span<const int> y, OptimizerState& state, const SgdConfig& sgd,
                  double lr) {
  ag::GradModeGuard on(true);
  const std::vector<int> labels(y.begin(), y.end());
  const ag::Var z = model.forward(ag::Var(x), ActivationMode::relu());
  const ag::Var loss = cross_entropy(z, labels);
  StepStats s;
  s.ce = s.total = loss.item();
  s.accuracy = batch_accuracy(z.value(), y);
  check_finite(s.total, s, lr, state);
  const auto params = model.parameter_vars();
  apply_update(model, values_of(ag::grad(loss, params)), state, sgd, lr);
  return s;
}

}  // namespace

StepStats natural_train_step(ModelBundle& model, const Tensor& x, std::span<const int> y, OptimizerState& state,
                             const SgdConfig& sgd, double lr) {
  const Shape s = batched(model, x, y);
  return ce_step(model, x.reshaped(s), y, state, sgd, lr);
}

StepStats pgd_train_step(ModelBundle& model, const Tensor& x, std::span<const int> y, const PerturbationBudget& budget,
                         OptimizerState& state, const SgdConfig& sgd, double lr, std::uint64_t seed) {
  const Shape s = batched(model, x, y);
  const Tensor x4 = x.reshaped(s);
  if (budget.steps == 0) return ce_step(model, x4, y, state, sgd, lr);
  return ce_step(model, pgd_attack(model, x4, y, budget, seed).perturbed, y, state, sgd, lr);
}

StepStats art_train_step(ModelBundle& model, const Tensor& x, std::span<const int> y, const ARTConfig& cfg,
                         OptimizerState& state, const SgdConfig& sgd, double lr, std::mt19937_64& rng) {
  const Shape s = batched(model, x, y);
  const Tensor x4 = x.reshaped(s);
  const std::vector<int> labels(y.begin(), y.end());
  const NegativeRule rule = cfg.loss_variant == LossVariant::argmin_negative ? NegativeRule::argmin : NegativeRule::argmax;
  const std::vector<int> negatives = select_negative_classes(logits(model, x4, ActivationMode::relu()), labels, rule);
  const ActivationMode soft = ActivationMode::softplus(cfg.beta);

  InnerMaxConfig ic;
  ic.budget = cfg.inner_budget;
  ic.loss = cfg.inner_loss;
  ic.variant = cfg.loss_variant;
  ic.channel_mean = cfg.channel_mean;
  ic.mode = soft;
  InnerMaxResult inner = art_inner_maximization(model, x4, labels, negatives, ic, rng);

  ag::GradModeGuard on(true);
  const ag::Var xv(inner.x_adv, true);
  const AttrLossResult attr =
      attribution_loss(model, AttrLossInputs{xv, labels, negatives, ag::Var(x4)}, cfg.loss_variant, cfg.channel_mean, soft);
  const ag::Var z = model.forward(xv, ActivationMode::relu());
  const ag::Var ce = cross_entropy(z, labels);
  const ag::Var total = ag::add(ce, ag::scale(attr.loss, cfg.lambda));

  StepStats st;
  st.ce = ce.item();
  st.attr = attr.loss.item();
  st.total = total.item();
  st.accuracy = batch_accuracy(z.value(), y);
  for (std::size_t i = 0; i < attr.terms.size(); ++i) {
    if (attr.degenerate[i]) continue;
    st.d_pos += attr.terms[i].d_pos;
    st.d_neg += attr.terms[i].d_neg;
    ++st.valid;
  }
  if (st.valid > 0) {
    st.d_pos /= st.valid;
    st.d_neg /= st.valid;
  }
  st.inner_trace = std::move(inner.objective_trace);
  st.inner_trace.push_back(st.attr);
  check_finite(st.total, st, lr, state);

  const auto params = model.parameter_vars();
  apply_update(model, values_of(ag::grad(total, params)), state, sgd, lr);
  return st;
}

StepStats loss_variant_step(ModelBundle& model, const Tensor& x, std::span<const int> y, ARTConfig cfg,
                            LossVariant variant, OptimizerState& state, const SgdConfig& sgd, double lr,
                            std::mt19937_64& rng) {
  cfg.loss_variant = variant;
  return art_train_step(model, x, y, cfg, state, sgd, lr, rng);
}

namespace {

json record_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"lr", r.lr},
          {"ce", r.ce},
          {"attr", r.attr},
          {"d_pos", r.d_pos},
          {"d_neg", r.d_neg},
          {"train_accuracy", r.train_accuracy},
          {"test_accuracy", r.test_accuracy},
          {"ascent_fraction", r.ascent_fraction},
          {"seconds", r.seconds}};
}

EpochRecord record_from_json(const json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch");
  r.lr = j.at("lr");
  r.ce = j.at("ce");
  r.attr = j.at("attr");
  r.d_pos = j.at("d_pos");
  r.d_neg = j.at("d_neg");
  r.train_accuracy = j.at("train_accuracy");
  r.test_accuracy = j.at("test_accuracy");
  r.ascent_fraction = j.at("ascent_fraction");
  r.seconds = j.at("seconds");
  return r;
}

void write_csv(const fs::path& path, const std::vector<EpochRecord>& rows) {
  std::string out = "epoch,lr,ce,attr,d_pos,d_neg,train_accuracy,test_accuracy,ascent_fraction,seconds\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{:.6g},{:.6f},{:.6f},{:.6f},{:.6f},{:.4f},{:.4f},{:.4f},{:.2f}\n", r.epoch, r.lr, r.ce, r.attr,
                       r.d_pos, r.d_neg, r.train_accuracy, r.test_accuracy, r.ascent_fraction, r.seconds);
  }
  write_file_atomic(path, out);
}

}  // namespace

TrainResult train_model(ModelBundle& model, const Dataset& train, const TrainConfig& cfg, const TrainOptions& opts) {
  if (train.size() == 0) throw InputError("empty training set");
  const std::string hash = config_hash(cfg);
  TrainResult result;
  OptimizerState& state = result.optimizer;
  const bool persist = !opts.output_dir.empty();
  const fs::path ckpt = opts.output_dir / "checkpoint.bin";
  const fs::path csv = opts.output_dir / "metrics.csv";
  int start = 0;
  if (persist && opts.resume && fs::exists(ckpt)) {
    Checkpoint ck = load_checkpoint(ckpt);
    if (ck.metadata.config_hash != hash) {
      throw ConfigMismatchError(fmt::format("checkpoint {} has config hash {}, current config is {}", ckpt.string(),
                                            ck.metadata.config_hash, hash));
    }
    std::vector<Tensor> values;
    for (const auto& p : ck.model.parameters()) values.push_back(p.var.value());
    model.set_parameter_values(values);
    state = std::move(ck.optimizer);
    start = ck.metadata.epoch;
    if (ck.metadata.extra.is_object()) {
      for (const auto& r : ck.metadata.extra.value("history", json::array())) result.history.push_back(record_from_json(r));
    }
    result.resumed_from = start;
    spdlog::info("resuming {} training at epoch {} from {}", to_string(cfg.kind), start, ckpt.string());
  }

  const std::int64_t n = train.size();
  for (int epoch = start; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x41525431u};
    std::mt19937_64 rng(seq);
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const double lr = cfg.schedule.lr_at(epoch);
    const bool warm = epoch < cfg.warmup_epochs;

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    double weight = 0, attr_weight = 0;
    int batches = 0, ascended = 0, art_batches = 0;
    for (std::int64_t b = 0; b < n; b += cfg.batch_size) {
      const std::int64_t e = std::min(n, b + cfg.batch_size);
      const std::span<const std::int64_t> idx(order.data() + b, static_cast<std::size_t>(e - b));
      Tensor xb = augment_batch(train.images.gather_rows(idx), rng, cfg.crop_pad, cfg.flip);
      std::vector<int> yb;
      for (auto i : idx) yb.push_back(train.labels[static_cast<std::size_t>(i)]);
      StepStats st;
      if (warm || cfg.kind == TrainingKind::natural) {
        st = natural_train_step(model, xb, yb, state, cfg.sgd, lr);
      } else if (cfg.kind == TrainingKind::pgd_adversarial) {
        st = pgd_train_step(model, xb, yb, cfg.pgd, state, cfg.sgd, lr, rng());
      } else {
        st = art_train_step(model, xb, yb, cfg.art, state, cfg.sgd, lr, rng);
        ++art_batches;
        ascended += st.inner_trace.back() >= st.inner_trace.front();
        rec.attr += st.attr * static_cast<double>(yb.size());
        rec.d_pos += st.d_pos * st.valid;
        rec.d_neg += st.d_neg * st.valid;
        attr_weight += st.valid;
      }
      const auto w = static_cast<double>(yb.size());
      rec.ce += st.ce * w;
      rec.train_accuracy += st.accuracy * w;
      weight += w;
      ++batches;
    }
    rec.ce /= weight;
    rec.train_accuracy /= weight;
    if (art_batches > 0) {
      rec.attr /= weight;
      rec.ascent_fraction = static_cast<double>(ascended) / art_batches;
    }
    if (attr_weight > 0) {
      rec.d_pos /= attr_weight;
      rec.d_neg /= attr_weight;
    }
    if (opts.eval != nullptr && opts.eval->size() > 0) {
      const std::int64_t m = std::min(opts.eval->size(), opts.eval_samples);
      const std::vector<int> yl(opts.eval->labels.begin(), opts.eval->labels.begin() + m);
      rec.test_accuracy = accuracy(model, opts.eval->images.slice_rows(0, m), yl);
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    spdlog::info("{} epoch {}/{} lr {:.4g} ce {:.4f} attr {:.4f} d_pos {:.4f} d_neg {:.4f} train_acc {:.4f} test_acc {:.4f} "
                 "({:.1f}s)",
                 to_string(cfg.kind), epoch + 1, cfg.epochs, lr, rec.ce, rec.attr, rec.d_pos, rec.d_neg,
                 rec.train_accuracy, rec.test_accuracy, rec.seconds);
    result.history.push_back(rec);
    if (opts.on_epoch) opts.on_epoch(rec);
    if (persist) {
      write_csv(csv, result.history);
      if ((epoch + 1) % std::max(1, opts.checkpoint_every) == 0 || epoch + 1 == cfg.epochs) {
        TrainingMetadata md{epoch + 1, cfg.seed, hash, to_string(cfg.kind), json::object()};
        auto hist = json::array();
        for (const auto& r : result.history) hist.push_back(record_json(r));
        md.extra["history"] = hist;
        md.extra["config"] = cfg;
        save_checkpoint(ckpt, model, state, md);
      }
    }
  }
  return result;
}

ModelBundle baseline_train(ModelBundle model, const Dataset& train, TrainingKind kind, TrainConfig cfg,
                           const TrainOptions& opts) {
  if (kind == TrainingKind::art) throw InputError("baseline_train handles natural and pgd_adversarial only");
  cfg.kind = kind;
  train_model(model, train, cfg, opts);
  return model;
}

}  // namespace art
