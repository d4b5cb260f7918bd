#include "codedvtr/bench.hpp"

#include <chrono>
#include <cmath>
#include <memory>
#include <random>

#include "codedvtr/attention.hpp"
#include "codedvtr/error.hpp"
#include "codedvtr/parallel.hpp"
#include "codedvtr/random.hpp"
#include "codedvtr/reference.hpp"

namespace cvtr::bench {

namespace {

// About half the cells of a cube are occupied, so lookups hit and miss.
std::vector<VoxelCoord> workload(std::size_t voxels, std::uint64_t seed) {
  const int side = std::max(2, static_cast<int>(std::ceil(std::cbrt(2.0 * static_cast<double>(voxels)))));
  std::vector<VoxelCoord> cells;
  for (int i = 0; i < side; ++i)
    for (int j = 0; j < side; ++j)
      for (int k = 0; k < side; ++k) cells.push_back({i, j, k});
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < voxels && i < cells.size(); ++i) {
    const auto j = i + static_cast<std::size_t>(rnd::uniform01(rng) * static_cast<double>(cells.size() - i));
    std::swap(cells[i], cells[j]);
  }
  cells.resize(std::min(voxels, cells.size()));
  return cells;
}

template <class F>
double best_seconds(int repeats, F&& f) {
  double best = INFINITY;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

}  // namespace

nlohmann::json gather(std::size_t voxels, int repeats, std::uint64_t seed, bool reference) {
  if (voxels == 0 || repeats < 1) throw ValidationError("bench needs voxels >= 1 and repeats >= 1");
  const auto coords = workload(voxels, seed);
  std::size_t found = 0;
  const double seconds = best_seconds(repeats, [&] {
    NeighborIndex index;
    if (reference) {
      index = reference::neighbor_index(coords, 1);
    } else {
      const CoordTable table(coords);
      index = build_neighbor_index(coords, table, 1);
    }
    found = 0;
    for (const auto& row : index.slots)
      for (auto n : row) found += n >= 0;
  });
  const double slots = 27.0 * static_cast<double>(coords.size());
  return {{"kernel", reference ? "gather-reference" : "gather"},
          {"voxels", coords.size()},
          {"threads", par::threads()},
          {"seconds", seconds},
          {"voxels_per_s", static_cast<double>(coords.size()) / seconds},
          {"slot_resolutions_per_s", slots / seconds},
          {"occupied_slots", found}};
}

namespace {

struct BlockWorkload {
  std::vector<VoxelCoord> coords;
  BlockSpec spec;
  ParamStore store;
  std::unique_ptr<AttentionBlock> block;
  LevelGeometry level;
  Matrix x;
};

// Coded block C=16, H=2, M=8, D=3 on the standard workload.
void make_block(BlockWorkload& w, std::size_t voxels, std::uint64_t seed) {
  w.coords = workload(voxels, seed);
  w.spec.channels = 16;
  w.spec.heads = 2;
  w.spec.shapes = 8;
  w.spec.dilations = 3;
  w.block = std::make_unique<AttentionBlock>(w.spec, w.store, "bench");
  w.store.freeze();
  std::mt19937_64 rng(seed);
  w.block->initialize(w.store, rng);
  w.level = LevelGeometry::build(w.coords, 1, w.spec.dilations);
  w.x = Matrix(w.coords.size(), 16);
  for (double& v : w.x.data) v = rnd::normal(rng);
}

}  // namespace

nlohmann::json block(std::size_t voxels, int repeats, std::uint64_t seed) {
  if (voxels == 0 || repeats < 1) throw ValidationError("bench needs voxels >= 1 and repeats >= 1");
  BlockWorkload w;
  make_block(w, voxels, seed);
  const double seconds = best_seconds(repeats, [&] { w.block->forward(w.store, w.level, w.x); });
  return {{"kernel", "block"},
          {"voxels", w.coords.size()},
          {"threads", par::threads()},
          {"seconds", seconds},
          {"voxels_per_s", static_cast<double>(w.coords.size()) / seconds}};
}

nlohmann::json aggregate(std::size_t voxels, int repeats, std::uint64_t seed, bool reference) {
  if (voxels == 0 || repeats < 1) throw ValidationError("bench needs voxels >= 1 and repeats >= 1");
  BlockWorkload w;
  make_block(w, voxels, seed);
  BlockCache cache;
  w.block->forward(w.store, w.level, w.x, &cache);
  Matrix z;
  const double seconds = best_seconds(repeats, [&] {
    z = reference ? reference::aggregate(w.coords, cache.kernel, w.spec.dilations, w.spec.heads, cache.values)
                  : cvtr::aggregate(w.level, cache.kernel, w.spec.dilations, w.spec.heads, cache.values);
  });
  double checksum = 0.0;
  for (double v : z.data) checksum += std::abs(v);
  return {{"kernel", reference ? "aggregate-reference" : "aggregate"},
          {"voxels", w.coords.size()},
          {"threads", par::threads()},
          {"seconds", seconds},
          {"voxels_per_s", static_cast<double>(w.coords.size()) / seconds},
          {"checksum", checksum}};
}

}  // namespace cvtr::bench
