#pragma once

#include <cstdint>
#include <vector>

#include "codedvtr/param_store.hpp"

namespace cvtr {

struct AdamConfig {
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW)
};

struct OptimizerState {
  AdamConfig config;
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
};

OptimizerState make_optimizer(const ParamStore& store, const AdamConfig& config);

// One Adam update of every trainable slice from the store's gradients.
// Throws NumericalError naming the slice on a non-finite gradient.
void adam_step(ParamStore& store, OptimizerState& state);

}  // namespace cvtr
