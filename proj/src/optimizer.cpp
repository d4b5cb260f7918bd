#include "codedvtr/optimizer.hpp"

#include <cmath>

#include "codedvtr/error.hpp"

namespace cvtr {

OptimizerState make_optimizer(const ParamStore& store, const AdamConfig& config) {
  OptimizerState state;
  state.config = config;
  state.m.assign(store.size(), 0.0);
  state.v.assign(store.size(), 0.0);
  return state;
}

void adam_step(ParamStore& store, OptimizerState& state) {
  if (state.m.size() != store.size() || state.v.size() != store.size())
    throw StructuralError("adam_step: optimizer state does not match the store");
  for (const auto& slice : store.slices()) {
    if (!slice.trainable) continue;
    for (std::size_t i = slice.offset; i < slice.offset + slice.size; ++i)
      if (!std::isfinite(store.all_grads()[i]))
        throw NumericalError("adam_step: non-finite gradient in slice '" + slice.name + "'");
  }
  const AdamConfig& c = state.config;
  ++state.step;
  const double correction1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double correction2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  auto values = store.all_values();
  auto grads = store.all_grads();
  for (const auto& slice : store.slices()) {
    if (!slice.trainable) continue;
    for (std::size_t i = slice.offset; i < slice.offset + slice.size; ++i) {
      const double g = grads[i];
      state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
      state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
      const double m_hat = state.m[i] / correction1;
      const double v_hat = state.v[i] / correction2;
      values[i] -= c.lr * c.weight_decay * values[i];
      values[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

}  // namespace cvtr
