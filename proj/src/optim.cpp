#include "art/optim.hpp"

#include <fmt/format.h>

namespace art {

void apply_update(ModelBundle& model, std::span<const Tensor> gradients, OptimizerState& state, const SgdConfig& cfg,
                  double lr) {
  auto params = model.parameters();
  if (gradients.size() != params.size()) {
    throw InputError(fmt::format("apply_update: {} gradients for {} parameters", gradients.size(), params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (gradients[i].shape() != params[i].var.shape()) {
      throw InputError(fmt::format("apply_update: gradient for {} has shape {}, parameter has {}", params[i].name,
                                   shape_str(gradients[i].shape()), shape_str(params[i].var.shape())));
    }
  }
  if (state.momentum.size() != params.size()) {
    state.momentum.clear();
    for (const auto& p : params) state.momentum.emplace_back(p.var.shape());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor theta = params[i].var.value();
    Tensor& v = state.momentum[i];
    if (v.shape() != theta.shape()) throw InputError("optimizer state does not match parameter " + params[i].name);
    const auto g = gradients[i].data();
    auto th = theta.data();
    auto buf = v.data();
    for (std::size_t j = 0; j < th.size(); ++j) {
      const double d = g[j] + cfg.weight_decay * th[j];
      buf[j] = cfg.momentum * buf[j] + d;
      th[j] -= lr * buf[j];
    }
    params[i].var = ag::Var(std::move(theta), true);
  }
  ++state.steps;
}

double StepSchedule::lr_at(int epoch) const {
  double lr = base_lr;
  for (std::size_t i = 0; i < milestones.size() && i < factors.size(); ++i) {
    if (epoch >= milestones[i]) lr *= factors[i];
  }
  return lr;
}

}  // namespace art
