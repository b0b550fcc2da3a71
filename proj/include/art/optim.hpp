#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "art/model.hpp"

namespace art {

struct SgdConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 2e-4;
};

struct OptimizerState {
  std::vector<Tensor> momentum;  // one buffer per parameter, lazily sized
  std::int64_t steps = 0;
};

/// One SGD-with-momentum step: d = g + wd*theta; v = mu*v + d; theta -= lr*v.
/// `lr` overrides cfg.lr so schedules can drive it.
void apply_update(ModelBundle& model, std::span<const Tensor> gradients, OptimizerState& state, const SgdConfig& cfg,
                  double lr);

inline void apply_update(ModelBundle& model, std::span<const Tensor> gradients, OptimizerState& state,
                         const SgdConfig& cfg) {
  apply_update(model, gradients, state, cfg, cfg.lr);
}

/// Step-wise schedule: lr = base * prod(factor_i for every milestone_i <= epoch).
struct StepSchedule {
  double base_lr = 0.1;
  std::vector<int> milestones;
  std::vector<double> factors;

  double lr_at(int epoch) const;
};

}  // namespace art
