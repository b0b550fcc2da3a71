#include "art/attribution.hpp"

#include <algorithm>
#include <fmt/format.h>
#include <random>

#include "art/errors.hpp"
#include "art/image.hpp"
#include "art/io.hpp"
#include "art/metrics.hpp"

namespace art {

std::string to_string(AttributionMethod m) {
  switch (m) {
    case AttributionMethod::gradient: return "gradient";
    case AttributionMethod::integrated_gradients: return "integrated_gradients";
    case AttributionMethod::gradshap: return "gradshap";
  }
  return "?";
}

AttributionMethod attribution_method_from_string(const std::string& s) {
  if (s == "gradient" || s == "grad") return AttributionMethod::gradient;
  if (s == "integrated_gradients" || s == "ig") return AttributionMethod::integrated_gradients;
  if (s == "gradshap") return AttributionMethod::gradshap;
  throw InputError(fmt::format("unknown attribution method '{}' (gradient, integrated_gradients, gradshap)", s));
}

namespace {

constexpr std::int64_t kMaxPointsPerPass = 128;

Shape item_shape(const Shape& x) { return Shape(x.end() - 3, x.end()); }

}  // namespace

PathSamples path_samples(const AttributionConfig& cfg, const Tensor& x, std::uint64_t stream) {
  const Shape item = item_shape(x.shape());
  const std::int64_t d = shape_numel(item);
  PathSamples ps;
  switch (cfg.method) {
    case AttributionMethod::gradient: {
      ps.baselines = Tensor({1, 1, item[0], item[1], item[2]});
      ps.alphas = Tensor({1, 1}, 1.0);
      break;
    }
    case AttributionMethod::integrated_gradients: {
      const int s = cfg.ig.riemann_steps;
      if (s < 1) throw InputError(fmt::format("riemann_steps must be >= 1, got {}", s));
      if (cfg.ig.baseline && cfg.ig.baseline->numel() != d) {
        throw InputError(fmt::format("IG baseline shape {} does not match input {}", shape_str(cfg.ig.baseline->shape()),
                                     shape_str(item)));
      }
      ps.baselines = Tensor({1, s, item[0], item[1], item[2]});
      if (cfg.ig.baseline) {
        for (int k = 0; k < s; ++k) std::copy_n(cfg.ig.baseline->data().begin(), d, ps.baselines.data().begin() + k * d);
      }
      ps.alphas = Tensor({1, s});
      const double off = cfg.ig.rule == RiemannRule::midpoint ? 0.5 : 0.0;
      for (int k = 0; k < s; ++k) ps.alphas[k] = (k + off) / s;
      break;
    }
    case AttributionMethod::gradshap: {
      const auto& g = cfg.gradshap;
      if (g.num_baselines < 1) throw InputError("gradshap needs num_baselines >= 1");
      if (g.pool.numel() > 0 && (g.pool.ndim() != 4 || g.pool.numel() / g.pool.dim(0) != d)) {
        throw InputError("gradshap baseline pool must be [M, C, H, W] matching the input");
      }
      std::mt19937_64 rng(g.seed ^ (0x9E3779B97F4A7C15ULL * (stream + 1)));
      std::normal_distribution<double> noise(0.0, 1.0);
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      const std::int64_t m = g.pool.numel() > 0 ? g.pool.dim(0) : 0;
      std::uniform_int_distribution<std::int64_t> pick(0, std::max<std::int64_t>(m - 1, 0));
      const int s = g.num_baselines;
      ps.baselines = Tensor({1, s, item[0], item[1], item[2]});
      ps.alphas = Tensor({1, s});
      for (int k = 0; k < s; ++k) {
        const std::int64_t src = m > 0 ? pick(rng) : -1;
        for (std::int64_t i = 0; i < d; ++i) {
          const double base = src >= 0 ? g.pool[src * d + i] : 0.0;
          ps.baselines[k * d + i] = base + (g.noise_scale > 0 ? g.noise_scale * noise(rng) : 0.0);
        }
        ps.alphas[k] = unit(rng);
      }
      break;
    }
  }
  return ps;
}

ag::Var path_attribution(const ModelBundle& model, const ag::Var& x, std::span<const int> classes,
                         const PathSamples& samples, ActivationMode mode, bool create_graph, bool gradient_only) {
  const Shape xs = model.batch_shape(x.shape());
  const std::int64_t n = xs[0], c = xs[1], h = xs[2], w = xs[3], d = c * h * w;
  if (samples.alphas.ndim() != 2 || samples.alphas.dim(0) != n) {
    throw InputError(fmt::format("path samples for {} inputs, batch has {}", samples.alphas.ndim() == 2 ? samples.alphas.dim(0) : -1, n));
  }
  const std::int64_t s = samples.alphas.dim(1);
  if (samples.baselines.shape() != Shape{n, s, c, h, w}) throw InputError("path baselines shape mismatch");
  if (static_cast<std::int64_t>(classes.size()) != n) throw InputError("one class index per input required");
  std::vector<int> repeated;
  repeated.reserve(static_cast<std::size_t>(n * s));
  for (std::int64_t i = 0; i < n; ++i) repeated.insert(repeated.end(), static_cast<std::size_t>(s), classes[static_cast<std::size_t>(i)]);

  if (create_graph) {
    ag::GradModeGuard on(true);
    const ag::Var x5 = ag::reshape(x, {n, 1, c, h, w});
    const ag::Var base(samples.baselines);
    const ag::Var diff = ag::sub(x5, base);
    const ag::Var pts = ag::reshape(ag::add(base, ag::mul(ag::Var(samples.alphas.reshaped({n, s, 1, 1, 1})), diff)),
                                    {n * s, c, h, w});
    const ag::Var score = select_logits(model.forward(pts, mode), repeated);
    const ag::Var ins[] = {pts};
    const ag::Var g = ag::reshape(ag::grad(score, ins, {}, true)[0], {n, s, c, h, w});
    const ag::Var terms = gradient_only ? g : ag::mul(diff, g);
    return ag::reshape(ag::scale(ag::sum_to(terms, {n, 1, c, h, w}), 1.0 / static_cast<double>(s)), x.shape());
  }

  const Tensor& xv = x.value();
  Tensor out(xs);
  for (std::int64_t start = 0; start < n * s; start += kMaxPointsPerPass) {
    const std::int64_t count = std::min(kMaxPointsPerPass, n * s - start);
    Tensor pts({count, c, h, w});
    for (std::int64_t r = 0; r < count; ++r) {
      const std::int64_t row = start + r, i = row / s;
      const double t = samples.alphas[row];
      for (std::int64_t j = 0; j < d; ++j) {
        const double b = samples.baselines[row * d + j];
        pts[r * d + j] = b + t * (xv[i * d + j] - b);
      }
    }
    const auto cls = std::span<const int>(repeated).subspan(static_cast<std::size_t>(start), static_cast<std::size_t>(count));
    const Tensor g = input_gradient(model, pts, cls, mode);
    for (std::int64_t r = 0; r < count; ++r) {
      const std::int64_t row = start + r, i = row / s;
      for (std::int64_t j = 0; j < d; ++j) {
        const double diff = xv[i * d + j] - samples.baselines[row * d + j];
        out[i * d + j] += (gradient_only ? 1.0 : diff) * g[r * d + j] / static_cast<double>(s);
      }
    }
  }
  return ag::Var(out.reshaped(x.shape()));
}

ag::Var attribution_graph(const ModelBundle& model, const ag::Var& x, std::span<const int> classes,
                          const AttributionConfig& cfg, ActivationMode mode, bool create_graph) {
  const Shape xs = model.batch_shape(x.shape());
  std::vector<Tensor> bases, alphas;
  for (std::int64_t i = 0; i < xs[0]; ++i) {
    PathSamples ps = path_samples(cfg, x.value().slice_rows(i, i + 1).reshaped(item_shape(xs)));
    bases.push_back(ps.baselines.reshaped(Shape(ps.baselines.shape().begin() + 1, ps.baselines.shape().end())));
    alphas.push_back(ps.alphas.reshaped({ps.alphas.dim(1)}));
  }
  const PathSamples all{stack(bases), stack(alphas)};
  return path_attribution(model, x, classes, all, mode, create_graph, cfg.method == AttributionMethod::gradient);
}

namespace {

AttributionMap single(const ModelBundle& model, const Tensor& x, int class_index, const AttributionConfig& cfg,
                      ActivationMode mode) {
  if (class_index < 0 || class_index >= model.num_classes()) {
    throw InputError(fmt::format("class index {} out of range [0, {})", class_index, model.num_classes()));
  }
  const Shape bs = model.batch_shape(x.shape());
  if (bs[0] != 1) throw InputError("expected a single input, got batch " + shape_str(x.shape()));
  const int cls[] = {class_index};
  const Tensor scores = attribution_graph(model, ag::Var(x.reshaped(bs)), cls, cfg, mode, false).value();
  return {scores.reshaped(x.shape()), cfg.method, class_index, Reduction::none};
}

}  // namespace

AttributionMap gradient_saliency(const ModelBundle& model, const Tensor& x, int class_index, ActivationMode mode) {
  AttributionConfig cfg;
  cfg.method = AttributionMethod::gradient;
  return single(model, x, class_index, cfg, mode);
}

AttributionMap integrated_gradients(const ModelBundle& model, const Tensor& x, int class_index, const IGConfig& ig,
                                    ActivationMode mode) {
  AttributionConfig cfg;
  cfg.method = AttributionMethod::integrated_gradients;
  cfg.ig = ig;
  return single(model, x, class_index, cfg, mode);
}

AttributionMap gradshap(const ModelBundle& model, const Tensor& x, int class_index, const GradShapConfig& gs,
                        ActivationMode mode) {
  AttributionConfig cfg;
  cfg.method = AttributionMethod::gradshap;
  cfg.gradshap = gs;
  return single(model, x, class_index, cfg, mode);
}

AttributionMap attribute(const ModelBundle& model, const Tensor& x, int class_index, const AttributionConfig& cfg,
                         ActivationMode mode) {
  return single(model, x, class_index, cfg, mode);
}

Tensor reduce_scores(const Tensor& scores, Reduction r) {
  switch (r) {
    case Reduction::none: return scores;
    case Reduction::abs: return abs_scores(scores);
    case Reduction::channel_mean: return channel_mean(scores);
  }
  return scores;
}

AttributionMap reduce(const AttributionMap& m, Reduction r) {
  if (m.reduction != Reduction::none) throw InputError("map is already reduced");
  return {reduce_scores(m.scores, r), m.method, m.class_index, r};
}

void export_heatmap(const AttributionMap& map, const std::filesystem::path& png_path, bool colormap) {
  Tensor spatial = map.scores;
  if (spatial.ndim() == 3) spatial = channel_mean(abs_scores(spatial));
  if (spatial.ndim() != 2) throw InputError("cannot render map of shape " + shape_str(map.scores.shape()));
  spatial = abs_scores(spatial);
  double lo = spatial[0], hi = spatial[0];
  for (double v : spatial.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (auto& v : spatial.data()) v = hi > lo ? (v - lo) / (hi - lo) : 0.0;
  write_png(png_path, render_map(spatial, colormap));
  std::filesystem::path npy = png_path;
  npy.replace_extension(".npy");
  write_npy(npy, map.scores);
}

}  // namespace art
