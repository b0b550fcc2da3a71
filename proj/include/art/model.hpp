#pragma once

// Classifier contract shared by attribution, attacks and training: logits,
// predictions and input gradients under a selectable activation pathway.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "art/autograd.hpp"
#include "art/tensor.hpp"

namespace art {

enum class ActivationKind { exact_relu, softplus };

/// Nonlinearity used by every hidden layer. softplus(beta) is the smooth
/// pathway with a nonzero second derivative; it tends to relu as beta grows.
struct ActivationMode {
  ActivationKind kind = ActivationKind::exact_relu;
  double beta = 0.0;

  static ActivationMode relu() { return {}; }
  static ActivationMode softplus(double beta);

  bool operator==(const ActivationMode&) const = default;
  std::string to_string() const;
};

struct ConvBlockSpec {
  int out_channels = 16;
  int kernel = 3;
  int stride = 1;
  int padding = 1;
};

struct ArchitectureSpec {
  /// "small_cnn" (conv blocks + global average pool + linear head) or
  /// "linear" (single affine map on the flattened input).
  std::string id = "small_cnn";
  Shape input_shape{3, 32, 32};
  int num_classes = 10;
  std::vector<ConvBlockSpec> conv_blocks{{16, 3, 1, 1}, {32, 3, 2, 1}, {64, 3, 2, 1}};
  /// Per-channel dataset normalization applied as the first, fixed layer.
  /// Empty means identity.
  std::vector<double> norm_mean;
  std::vector<double> norm_std;

  static ArchitectureSpec small_cnn(Shape input_shape = {3, 32, 32}, int num_classes = 10);
  static ArchitectureSpec linear(Shape input_shape, int num_classes);
};

void to_json(nlohmann::json& j, const ArchitectureSpec& s);
void from_json(const nlohmann::json& j, ArchitectureSpec& s);

struct Parameter {
  std::string name;
  ag::Var var;  // leaf, requires_grad
};

class ModelBundle {
 public:
  /// He-normal conv weights, zero biases, uniform(+-1/sqrt(fan_in)) head.
  static ModelBundle create(const ArchitectureSpec& spec, std::uint64_t seed);

  const ArchitectureSpec& spec() const noexcept { return spec_; }
  const std::string& architecture_id() const noexcept { return spec_.id; }
  const Shape& input_shape() const noexcept { return spec_.input_shape; }
  int num_classes() const noexcept { return spec_.num_classes; }

  ActivationMode activation() const noexcept { return activation_; }
  void set_activation(ActivationMode mode) noexcept { activation_ = mode; }

  std::span<Parameter> parameters() noexcept { return params_; }
  std::span<const Parameter> parameters() const noexcept { return params_; }
  std::vector<ag::Var> parameter_vars() const;
  std::int64_t parameter_count() const;
  /// Replaces parameter values (same names, same shapes).
  void set_parameter_values(std::span<const Tensor> values);

  /// Logits for a batch [N, C, H, W] under the bundle's activation mode.
  ag::Var forward(const ag::Var& x) const { return forward(x, activation_); }
  /// Logits under an explicit activation mode; the bundle is not modified.
  ag::Var forward(const ag::Var& x, ActivationMode mode) const;

  /// Batched view of x: accepts [C,H,W] or [N,C,H,W]; throws InputError otherwise.
  Shape batch_shape(const Shape& x) const;

 private:
  ArchitectureSpec spec_;
  ActivationMode activation_;
  std::vector<Parameter> params_;
};

/// Raw pre-softmax scores. Returns [k] for a single input, [N, k] for a batch.
Tensor logits(const ModelBundle& model, const Tensor& x);
Tensor logits(const ModelBundle& model, const Tensor& x, ActivationMode mode);

/// Index of the largest value; ties go to the lowest index.
int argmax(std::span<const double> values);

/// Predicted class per sample (exact pathway unless a mode is given).
std::vector<int> predict(const ModelBundle& model, const Tensor& x);
std::vector<int> predict(const ModelBundle& model, const Tensor& x, ActivationMode mode);

/// d f(x)_c / dx for a single input (class_index) or for every sample of a
/// batch with the same class.
Tensor input_gradient(const ModelBundle& model, const Tensor& x, int class_index);
Tensor input_gradient(const ModelBundle& model, const Tensor& x, int class_index, ActivationMode mode);
/// Per-sample classes for a batch [N, ...].
Tensor input_gradient(const ModelBundle& model, const Tensor& x, std::span<const int> class_indices,
                      ActivationMode mode);

/// Graph-level input gradient: x is [N, C, H, W]; the result can be
/// differentiated again with respect to x and the parameters when
/// create_graph is set (double backward; meaningful in softplus mode).
ag::Var input_gradient(const ModelBundle& model, const ag::Var& x, std::span<const int> class_indices,
                       ActivationMode mode, bool create_graph);

/// Sum over the batch of logits[n, classes[n]] as a 0-d Var.
ag::Var select_logits(const ag::Var& logits, std::span<const int> classes);

/// Mean cross-entropy of [N, k] logits against labels.
ag::Var cross_entropy(const ag::Var& logits, std::span<const int> labels);

}  // namespace art
