#include "art/autograd.hpp"

#include <fmt/format.h>
#include <unordered_map>
#include <unordered_set>

#include "kernels.hpp"

namespace art::ag {

namespace {

thread_local bool g_grad_enabled = true;

Var constant(Tensor t) { return Var(std::move(t), false); }

Var ones_like(const Var& v) { return constant(Tensor(v.shape(), 1.0)); }

}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

const Tensor& Var::value() const {
  if (!node_) throw InputError("use of undefined Var");
  return node_->value;
}

bool grad_enabled() noexcept { return g_grad_enabled; }

GradModeGuard::GradModeGuard(bool enabled) : previous_(g_grad_enabled) { g_grad_enabled = enabled; }
GradModeGuard::~GradModeGuard() { g_grad_enabled = previous_; }

Var make_result(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* op) {
  bool rg = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) rg = rg || in.requires_grad();
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  if (rg) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Var::from_node(std::move(node));
}

std::vector<Var> grad(const Var& output, std::span<const Var> inputs, const Var& grad_output, bool create_graph) {
  if (!output.defined()) throw InputError("grad of undefined output");
  Var seed = grad_output;
  if (!seed.defined()) {
    if (output.numel() != 1) throw InputError("grad: non-scalar output " + shape_str(output.shape()) + " needs grad_output");
    seed = ones_like(output);
  } else if (seed.shape() != output.shape()) {
    throw InputError("grad: grad_output shape mismatch");
  }

  std::unordered_set<const Node*> targets;
  for (const auto& in : inputs) {
    if (in.defined()) targets.insert(in.node());
  }

  // Post-order DFS; `needed` marks nodes from which some target is reachable.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_map<const Node*, bool> needed;
  if (output.requires_grad()) {
    struct Frame {
      std::shared_ptr<Node> node;
      std::size_t next = 0;
    };
    std::vector<Frame> stack{{output.shared(), 0}};
    needed[output.node()] = false;
    while (!stack.empty()) {
      auto& f = stack.back();
      if (f.next < f.node->inputs.size()) {
        const Var& child = f.node->inputs[f.next++];
        if (!child.requires_grad() || needed.count(child.node())) continue;
        needed[child.node()] = false;
        stack.push_back({child.shared(), 0});
        continue;
      }
      bool need = targets.count(f.node.get()) > 0;
      for (const auto& in : f.node->inputs) {
        if (in.requires_grad() && needed[in.node()]) need = true;
      }
      needed[f.node.get()] = need;
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  GradModeGuard mode(create_graph);
  std::unordered_map<const Node*, Var> grads;
  grads[output.node()] = seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const auto& node = *it;
    if (!needed[node.get()] || !node->backward) continue;
    auto found = grads.find(node.get());
    if (found == grads.end()) continue;
    std::vector<bool> needs(node->inputs.size(), false);
    bool any = false;
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      const auto& in = node->inputs[i];
      needs[i] = in.requires_grad() && needed[in.node()];
      any = any || needs[i];
    }
    if (!any) continue;
    const Var self = Var::from_node(node);
    const std::vector<Var> in_grads = node->backward(found->second, self, needs);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      if (!needs[i]) continue;
      const Var& g = in_grads.at(i);
      if (!g.defined()) continue;
      if (g.shape() != node->inputs[i].shape()) {
        throw std::logic_error(fmt::format("backward of {} produced gradient {} for input {}", node->op,
                                           shape_str(g.shape()), shape_str(node->inputs[i].shape())));
      }
      auto [slot, inserted] = grads.try_emplace(node->inputs[i].node(), g);
      if (!inserted) slot->second = add(slot->second, g);
    }
    // Interior gradients are no longer needed once propagated.
    if (!targets.count(node.get()) && node.get() != output.node()) grads.erase(node.get());
  }

  std::vector<Var> result;
  result.reserve(inputs.size());
  for (const auto& in : inputs) {
    auto found = in.defined() ? grads.find(in.node()) : grads.end();
    if (found != grads.end()) {
      result.push_back(found->second);
    } else {
      result.push_back(constant(Tensor(in.defined() ? in.shape() : Shape{})));
    }
  }
  return result;
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  return make_result(
      kernels::binary(a.value(), b.value(), [](double x, double y) { return x + y; }), {a, b},
      [](const Var& g, const Var& self, const std::vector<bool>& needs) {
        const auto& in = self.node()->inputs;
        return std::vector<Var>{needs[0] ? sum_to(g, in[0].shape()) : Var{}, needs[1] ? sum_to(g, in[1].shape()) : Var{}};
      },
      "add");
}

Var sub(const Var& a, const Var& b) {
  return make_result(
      kernels::binary(a.value(), b.value(), [](double x, double y) { return x - y; }), {a, b},
      [](const Var& g, const Var& self, const std::vector<bool>& needs) {
        const auto& in = self.node()->inputs;
        return std::vector<Var>{needs[0] ? sum_to(g, in[0].shape()) : Var{},
                                needs[1] ? sum_to(neg(g), in[1].shape()) : Var{}};
      },
      "sub");
}

Var mul(const Var& a, const Var& b) {
  return make_result(
      kernels::binary(a.value(), b.value(), [](double x, double y) { return x * y; }), {a, b},
      [](const Var& g, const Var& self, const std::vector<bool>& needs) {
        const auto& in = self.node()->inputs;
        return std::vector<Var>{needs[0] ? sum_to(mul(g, in[1]), in[0].shape()) : Var{},
                                needs[1] ? sum_to(mul(g, in[0]), in[1].shape()) : Var{}};
      },
      "mul");
}

Var div(const Var& a, const Var& b) {
  return make_result(
      kernels::binary(a.value(), b.value(), [](double x, double y) { return x / y; }), {a, b},
      [](const Var& g, const Var& self, const std::vector<bool>& needs) {
        const auto& in = self.node()->inputs;
        Var ga, gb;
        if (needs[0]) ga = sum_to(div(g, in[1]), in[0].shape());
        if (needs[1]) gb = sum_to(neg(div(mul(g, self), in[1])), in[1].shape());
        return std::vector<Var>{ga, gb};
      },
      "div");
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double s) {
  return make_result(
      kernels::unary(a.value(), [s](double x) { return x * s; }), {a},
      [s](const Var& g, const Var&, const std::vector<bool>&) { return std::vector<Var>{scale(g, s)}; }, "scale");
}

Var shift(const Var& a, double s) {
  return make_result(
      kernels::unary(a.value(), [s](double x) { return x + s; }), {a},
      [](const Var& g, const Var&, const std::vector<bool>&) { return std::vector<Var>{g}; }, "shift");
}

Var exp(const Var& a) {
  return make_result(
      kernels::unary(a.value(), [](double x) { return std::exp(x); }), {a},
      [](const Var& g, const Var& self, const std::vector<bool>&) { return std::vector<Var>{mul(g, self)}; }, "exp");
}

Var log(const Var& a) {
  return make_result(
      kernels::unary(a.value(), [](double x) { return std::log(x); }), {a},
      [](const Var& g, const Var& self, const std::vector<bool>&) {
        return std::vector<Var>{div(g, self.node()->inputs[0])};
      },
      "log");
}

Var sqrt(const Var& a) {
  return make_result(
      kernels::unary(a.value(), [](double x) { return std::sqrt(x); }), {a},
      [](const Var& g, const Var& self, const std::vector<bool>&) {
        return std::vector<Var>{div(scale(g, 0.5), self)};
      },
      "sqrt");
}

Var square(const Var& a) {
  return make_result(
      kernels::unary(a.value(), [](double x) { return x * x; }), {a},
      [](const Var& g, const Var& self, const std::vector<bool>&) {
        return std::vector<Var>{scale(mul(g, self.node()->inputs[0]), 2.0)};
      },
      "square");
}

Var abs(const Var& a) {
  return make_result(
      kernels::unary(a.value(), [](double x) { return std::abs(x); }), {a},
      [](const Var& g, const Var& self, const std::vector<bool>&) {
        Tensor sign = kernels::unary(self.node()->inputs[0].value(),
                                     [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
        return std::vector<Var>{mul(g, constant(std::move(sign)))};
      },
      "abs");
}

Var relu(const Var& a) {
  return make_result(
      kernels::unary(a.value(), [](double x) { return x > 0 ? x : 0.0; }), {a},
      [](const Var& g, const Var& self, const std::vector<bool>&) {
        Tensor mask = kernels::unary(self.node()->inputs[0].value(), [](double x) { return x > 0 ? 1.0 : 0.0; });
        return std::vector<Var>{mul(g, constant(std::move(mask)))};
      },
      "relu");
}

Var softplus(const Var& a, double beta) {
  if (!(beta > 0)) throw InputError("softplus beta must be positive");
  return make_result(
      kernels::unary(a.value(), [beta](double x) { return kernels::softplus(x, beta); }), {a},
      [beta](const Var& g, const Var& self, const std::vector<bool>&) {
        return std::vector<Var>{mul(g, sigmoid(self.node()->inputs[0], beta))};
      },
      "softplus");
}

Var sigmoid(const Var& a, double beta) {
  if (!(beta > 0)) throw InputError("sigmoid beta must be positive");
  return make_result(
      kernels::unary(a.value(), [beta](double x) { return kernels::sigmoid(x, beta); }), {a},
      [beta](const Var& g, const Var& self, const std::vector<bool>&) {
        // d/dz sigmoid(beta z) = beta s (1 - s)
        Var ds = scale(mul(self, shift(neg(self), 1.0)), beta);
        return std::vector<Var>{mul(g, ds)};
      },
      "sigmoid");
}

// ---------------------------------------------------------------- shape

Var sum(const Var& a) { return reshape(sum_to(a, Shape(a.shape().size(), 1)), Shape{}); }

Var mean(const Var& a) {
  if (a.numel() == 0) throw InputError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Var sum_to(const Var& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  return make_result(
      kernels::sum_to(a.value(), shape), {a},
      [](const Var& g, const Var& self, const std::vector<bool>&) {
        return std::vector<Var>{expand(g, self.node()->inputs[0].shape())};
      },
      "sum_to");
}

Var expand(const Var& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  return make_result(
      kernels::expand(a.value(), shape), {a},
      [](const Var& g, const Var& self, const std::vector<bool>&) {
        return std::vector<Var>{sum_to(g, self.node()->inputs[0].shape())};
      },
      "expand");
}

Var reshape(const Var& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  return make_result(
      a.value().reshaped(shape), {a},
      [](const Var& g, const Var& self, const std::vector<bool>&) {
        return std::vector<Var>{reshape(g, self.node()->inputs[0].shape())};
      },
      "reshape");
}

Var transpose(const Var& a) {
  return make_result(
      kernels::transpose(a.value()), {a},
      [](const Var& g, const Var&, const std::vector<bool>&) { return std::vector<Var>{transpose(g)}; }, "transpose");
}

Var matmul(const Var& a, const Var& b) {
  return make_result(
      kernels::matmul(a.value(), b.value()), {a, b},
      [](const Var& g, const Var& self, const std::vector<bool>& needs) {
        const auto& in = self.node()->inputs;
        return std::vector<Var>{needs[0] ? matmul(g, transpose(in[1])) : Var{},
                                needs[1] ? matmul(transpose(in[0]), g) : Var{}};
      },
      "matmul");
}

// ---------------------------------------------------------------- convolution

Var conv2d(const Var& x, const Var& w, ConvGeometry geom) {
  return make_result(
      kernels::conv2d(x.value(), w.value(), geom.stride, geom.padding), {x, w},
      [geom](const Var& g, const Var& self, const std::vector<bool>& needs) {
        const auto& in = self.node()->inputs;
        return std::vector<Var>{needs[0] ? conv2d_input_grad(g, in[1], in[0].shape(), geom) : Var{},
                                needs[1] ? conv2d_weight_grad(in[0], g, in[1].shape(), geom) : Var{}};
      },
      "conv2d");
}

Var conv2d_input_grad(const Var& g, const Var& w, const Shape& input_shape, ConvGeometry geom) {
  return make_result(
      kernels::conv2d_input_grad(g.value(), w.value(), input_shape, geom.stride, geom.padding), {g, w},
      [geom](const Var& h, const Var& self, const std::vector<bool>& needs) {
        const auto& in = self.node()->inputs;
        return std::vector<Var>{needs[0] ? conv2d(h, in[1], geom) : Var{},
                                needs[1] ? conv2d_weight_grad(h, in[0], in[1].shape(), geom) : Var{}};
      },
      "conv2d_input_grad");
}

Var conv2d_weight_grad(const Var& x, const Var& g, const Shape& weight_shape, ConvGeometry geom) {
  return make_result(
      kernels::conv2d_weight_grad(x.value(), g.value(), weight_shape, geom.stride, geom.padding), {x, g},
      [geom](const Var& h, const Var& self, const std::vector<bool>& needs) {
        const auto& in = self.node()->inputs;
        return std::vector<Var>{needs[0] ? conv2d_input_grad(in[1], h, in[0].shape(), geom) : Var{},
                                needs[1] ? conv2d(in[0], h, geom) : Var{}};
      },
      "conv2d_weight_grad");
}

// ---------------------------------------------------------------- softmax family

Var logsumexp_rows(const Var& z) {
  return make_result(
      kernels::logsumexp_rows(z.value()), {z},
      [](const Var& g, const Var& self, const std::vector<bool>&) {
        const Var& in = self.node()->inputs[0];
        return std::vector<Var>{mul(expand(g, in.shape()), softmax_rows(in))};
      },
      "logsumexp_rows");
}

Var softmax_rows(const Var& z) {
  return make_result(
      kernels::softmax_rows(z.value()), {z},
      [](const Var& g, const Var& self, const std::vector<bool>&) {
        const Shape rows{self.shape()[0], 1};
        return std::vector<Var>{mul(self, sub(g, sum_to(mul(g, self), rows)))};
      },
      "softmax_rows");
}

}  // namespace art::ag
