#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// Every backward rule is itself written with differentiable Var operations,
// so gradients computed with create_graph = true can be differentiated again
// (input-gradient regularizers, attacks on attribution maps).

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "art/tensor.hpp"

namespace art::ag {

class Var;
struct Node;

/// grad_out has the node's value shape; self is the node's own Var; needs[i]
/// says whether inputs[i] wants a gradient. Entries for unneeded inputs may
/// be left undefined.
using BackwardFn = std::function<std::vector<Var>(const Var& grad_out, const Var& self, const std::vector<bool>& needs)>;

struct Node {
  Tensor value;
  bool requires_grad = false;
  std::vector<Var> inputs;
  BackwardFn backward;
  const char* op = "leaf";
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::int64_t numel() const { return value().numel(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  double item() const { return value().item(); }

  /// Same value, cut from the graph.
  Var detach() const { return Var(value(), false); }

  Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& shared() const noexcept { return node_; }

  static Var from_node(std::shared_ptr<Node> n) {
    Var v;
    v.node_ = std::move(n);
    return v;
  }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled() noexcept;

/// Sets the recording mode for the current thread for the guard's lifetime.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

/// Builds a result Var. Records a graph node only when recording is enabled
/// and some input requires grad.
Var make_result(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* op);

/// Gradients of `output` with respect to each of `inputs`. When grad_output is
/// undefined, output must hold a single element and is seeded with 1. Inputs
/// unreachable from output receive zero tensors. With create_graph the
/// returned Vars are differentiable.
std::vector<Var> grad(const Var& output, std::span<const Var> inputs, const Var& grad_output = {},
                      bool create_graph = false);

// ---- elementwise (numpy-style broadcasting for binary ops) ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var shift(const Var& a, double s);
Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var square(const Var& a);
Var abs(const Var& a);
Var relu(const Var& a);
/// log(1 + exp(beta * a)) / beta
Var softplus(const Var& a, double beta);
/// 1 / (1 + exp(-beta * a)), the derivative of softplus(a, beta).
Var sigmoid(const Var& a, double beta);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

// ---- shape and reduction ----
Var sum(const Var& a);  ///< 0-d result
Var mean(const Var& a);
Var sum_to(const Var& a, const Shape& shape);
Var expand(const Var& a, const Shape& shape);
Var reshape(const Var& a, const Shape& shape);
Var transpose(const Var& a);  ///< 2-D only
Var matmul(const Var& a, const Var& b);

// ---- convolution (NCHW activations, OIHW weights) ----
struct ConvGeometry {
  int stride = 1;
  int padding = 0;
};

Var conv2d(const Var& x, const Var& w, ConvGeometry geom);
/// Adjoint of conv2d with respect to its input: maps output-space g to input space.
Var conv2d_input_grad(const Var& g, const Var& w, const Shape& input_shape, ConvGeometry geom);
/// Adjoint of conv2d with respect to its weight.
Var conv2d_weight_grad(const Var& x, const Var& g, const Shape& weight_shape, ConvGeometry geom);

// ---- row-wise softmax family on [N, K] ----
Var logsumexp_rows(const Var& z);  ///< [N, 1]
Var softmax_rows(const Var& z);

}  // namespace art::ag
