#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "codedvtr/attention.hpp"
#include "codedvtr/param_store.hpp"

namespace cvtr {

// Evaluates the loss at the store's current values. When `with_grad` is set
// it must also overwrite the store's gradients with the analytic gradient.
using LossFn = std::function<double(ParamStore& store, bool with_grad)>;

struct SliceError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<SliceError> slices;
  double max_rel_error = 0.0;
  std::string worst_slice;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

// Central differences on `samples` coordinates drawn with `seed` (all
// coordinates when samples == 0 or exceeds the store size). Relative error
// uses max(|a|, |b|, 1e-12) as denominator.
GradCheckReport finite_diff_check(const LossFn& loss, ParamStore& store, double h = 1e-5,
                                  std::size_t samples = 0, std::uint64_t seed = 0);

struct BlockCheck {
  double param_rel = 0.0;
  double input_rel = 0.0;
  GradCheckReport report;
};

// k random region masks, each with the center bit set.
std::vector<OccupancyMask> random_regions(std::size_t k, std::mt19937_64& rng);

// Finite-difference check of one block on n random voxels in [0, box)^3, for
// the loss L = sum(r * y) + 0.1 * sum(y^2). Every parameter, the temperature
// and the block input are checked. Coded specs without regions get random ones.
BlockCheck block_gradcheck(std::uint64_t seed, BlockSpec spec, std::size_t n, int box);

}  // namespace cvtr
