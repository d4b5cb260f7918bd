#include "codedvtr/finite_diff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "codedvtr/error.hpp"
#include "codedvtr/random.hpp"

namespace cvtr {

GradCheckReport finite_diff_check(const LossFn& loss, ParamStore& store, double h, std::size_t samples,
                                  std::uint64_t seed) {
  store.zero_grads();
  const double base = loss(store, true);
  const std::vector<double> analytic(store.all_grads().begin(), store.all_grads().end());
  if (loss(store, false) != base) throw NumericalError("finite_diff_check: loss is not deterministic");

  std::vector<std::size_t> coords(store.size());
  std::iota(coords.begin(), coords.end(), 0);
  if (samples != 0 && samples < coords.size()) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < samples; ++i) {
      const std::size_t j = i + rng() % (coords.size() - i);
      std::swap(coords[i], coords[j]);
    }
    coords.resize(samples);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckReport report;
  for (const auto& s : store.slices()) report.slices.push_back({s.name, 0.0, 0});
  auto values = store.all_values();
  std::size_t slice_id = 0;
  for (std::size_t idx : coords) {
    while (idx >= store.slices()[slice_id].offset + store.slices()[slice_id].size) ++slice_id;
    const double saved = values[idx];
    values[idx] = saved + h;
    const double up = loss(store, false);
    values[idx] = saved - h;
    const double down = loss(store, false);
    values[idx] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic[idx];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-12});
    auto& se = report.slices[slice_id];
    se.max_rel_error = std::max(se.max_rel_error, rel);
    ++se.checked;
    ++report.checked;
    if (rel > report.max_rel_error || report.checked == 1) {
      report.max_rel_error = std::max(report.max_rel_error, rel);
      report.worst_slice = se.name;
      report.worst_index = idx - store.slices()[slice_id].offset;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
  }
  std::copy(analytic.begin(), analytic.end(), store.all_grads().begin());
  return report;
}

namespace {

std::vector<VoxelCoord> random_coords(std::size_t n, int box, std::mt19937_64& rng) {
  std::set<VoxelCoord> seen;
  std::vector<VoxelCoord> out;
  while (out.size() < n) {
    VoxelCoord c{static_cast<int>(rng() % box), static_cast<int>(rng() % box), static_cast<int>(rng() % box)};
    if (seen.insert(c).second) out.push_back(c);
  }
  return out;
}

Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  Matrix m(rows, cols);
  for (double& v : m.data) v = rnd::normal(rng);
  return m;
}

}  // namespace

std::vector<OccupancyMask> random_regions(std::size_t k, std::mt19937_64& rng) {
  std::vector<OccupancyMask> out;
  for (std::size_t i = 0; i < k; ++i)
    out.push_back((static_cast<OccupancyMask>(rng()) & kFullMask) | kCenterBit);
  return out;
}

BlockCheck block_gradcheck(std::uint64_t seed, BlockSpec spec, std::size_t n, int box) {
  std::mt19937_64 rng(seed);
  if (spec.kind == BlockKind::coded && spec.regions.empty())
    spec.regions = random_regions(static_cast<std::size_t>(spec.codebook_size()), rng);
  const auto coords = random_coords(n, box, rng);
  const auto level = LevelGeometry::build(coords, 1, std::max(1, spec.dilations));
  ParamStore store;
  AttentionBlock block(spec, store, "b");
  store.freeze();
  block.initialize(store, rng);
  for (double& v : store.all_values()) v = 0.5 * rnd::normal(rng);
  if (spec.kind == BlockKind::coded)
    store.values(block.slices().temperature)[0] = 0.5 + rnd::uniform01(rng);
  const auto c = static_cast<std::size_t>(spec.channels);
  Matrix x = random_matrix(n, c, rng);
  const Matrix r = random_matrix(n, c, rng);

  auto eval = [&](ParamStore& s, const Matrix& input, bool with_grad, Matrix* dx) {
    BlockCache cache;
    const Matrix y = block.forward(s, level, input, &cache);
    double loss = 0.0;
    Matrix dy(n, c);
    for (std::size_t i = 0; i < y.data.size(); ++i) {
      loss += r.data[i] * y.data[i] + 0.1 * y.data[i] * y.data[i];
      dy.data[i] = r.data[i] + 0.2 * y.data[i];
    }
    if (with_grad) {
      s.zero_grads();
      Matrix g = block.backward(s, level, cache, dy);
      if (dx) *dx = std::move(g);
    }
    return loss;
  };

  BlockCheck out;
  out.report = finite_diff_check([&](ParamStore& s, bool g) { return eval(s, x, g, nullptr); }, store, 1e-5, 0, seed);
  out.param_rel = out.report.max_rel_error;

  Matrix dx;
  eval(store, x, true, &dx);
  const double h = 1e-5;
  for (std::size_t i = 0; i < x.data.size(); ++i) {
    const double saved = x.data[i];
    x.data[i] = saved + h;
    const double up = eval(store, x, false, nullptr);
    x.data[i] = saved - h;
    const double down = eval(store, x, false, nullptr);
    x.data[i] = saved;
    const double numeric = (up - down) / (2 * h);
    const double rel = std::abs(numeric - dx.data[i]) / std::max({std::abs(numeric), std::abs(dx.data[i]), 1e-12});
    out.input_rel = std::max(out.input_rel, rel);
  }
  return out;
}

}  // namespace cvtr
