#pragma once

// Attribution maps: gradient saliency, Integrated Gradients and GradSHAP
// (expected gradients).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>

#include "art/autograd.hpp"
#include "art/model.hpp"
#include "art/tensor.hpp"

namespace art {

enum class AttributionMethod { gradient, integrated_gradients, gradshap };
enum class Reduction { none, channel_mean, abs };
enum class RiemannRule { left, midpoint };

std::string to_string(AttributionMethod m);
AttributionMethod attribution_method_from_string(const std::string& s);

struct AttributionMap {
  Tensor scores;
  AttributionMethod method = AttributionMethod::gradient;
  int class_index = 0;
  Reduction reduction = Reduction::none;
};

struct IGConfig {
  std::optional<Tensor> baseline;  // empty: all zeros
  int riemann_steps = 50;
  RiemannRule rule = RiemannRule::midpoint;
};

struct GradShapConfig {
  int num_baselines = 32;
  double noise_scale = 0.1;
  std::uint64_t seed = 0;
  /// Baseline pool [M, C, H, W], typically training images. Empty: zeros.
  Tensor pool;
};

struct AttributionConfig {
  AttributionMethod method = AttributionMethod::integrated_gradients;
  IGConfig ig;
  GradShapConfig gradshap;
};

AttributionMap gradient_saliency(const ModelBundle& model, const Tensor& x, int class_index, ActivationMode mode);
AttributionMap integrated_gradients(const ModelBundle& model, const Tensor& x, int class_index, const IGConfig& cfg,
                                    ActivationMode mode);
AttributionMap gradshap(const ModelBundle& model, const Tensor& x, int class_index, const GradShapConfig& cfg,
                        ActivationMode mode);

/// Dispatches on cfg.method. x is a single input [C, H, W].
AttributionMap attribute(const ModelBundle& model, const Tensor& x, int class_index, const AttributionConfig& cfg,
                         ActivationMode mode);

/// Path points for a batch: baselines [N, S, C, H, W] and interpolation
/// coefficients [N, S]. IG and GradSHAP are both
///   map_n = mean_s (x_n - b_ns) * grad f(b_ns + t_ns (x_n - b_ns))_{c_n}.
struct PathSamples {
  Tensor baselines;
  Tensor alphas;
};

/// Fixed path samples for one input per cfg (gradient saliency: one point at
/// t = 1 with a zero baseline, weighted so the map equals the raw gradient).
PathSamples path_samples(const AttributionConfig& cfg, const Tensor& x, std::uint64_t stream = 0);

/// Graph-level attribution for x [N, C, H, W] with per-sample path samples
/// (baselines [N,S,C,H,W], alphas [N,S]). Differentiable in x when
/// create_graph is set; otherwise evaluates in chunks of at most
/// `max_points` forward passes per call.
ag::Var path_attribution(const ModelBundle& model, const ag::Var& x, std::span<const int> classes,
                         const PathSamples& samples, ActivationMode mode, bool create_graph, bool gradient_only = false);

/// Differentiable attribution used by attribution attacks.
ag::Var attribution_graph(const ModelBundle& model, const ag::Var& x, std::span<const int> classes,
                          const AttributionConfig& cfg, ActivationMode mode, bool create_graph);

Tensor reduce_scores(const Tensor& scores, Reduction r);
AttributionMap reduce(const AttributionMap& m, Reduction r);

/// Writes an 8-bit heatmap PNG (abs, channel-mean, min-max normalized; gray
/// or colormapped) and the raw scores as .npy next to it.
void export_heatmap(const AttributionMap& map, const std::filesystem::path& png_path, bool colormap = true);

}  // namespace art
