#pragma once

#include <bit>
#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "codedvtr/attention.hpp"
#include "codedvtr/matrix.hpp"
#include "codedvtr/random.hpp"
#include "codedvtr/voxel_grid.hpp"

namespace testing {

using cvtr::Matrix;
using cvtr::VoxelCoord;

// n distinct coordinates inside [0, box)^3, in draw order (not sorted).
inline std::vector<VoxelCoord> random_coords(std::size_t n, int box, std::mt19937_64& rng) {
  std::set<VoxelCoord> seen;
  std::vector<VoxelCoord> out;
  while (out.size() < n) {
    VoxelCoord c{static_cast<int>(rng() % box), static_cast<int>(rng() % box), static_cast<int>(rng() % box)};
    if (seen.insert(c).second) out.push_back(c);
  }
  return out;
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.data) v = scale * cvtr::rnd::normal(rng);
  return m;
}

inline void randomize(std::span<double> values, std::mt19937_64& rng, double scale) {
  for (double& v : values) v = scale * cvtr::rnd::normal(rng);
}

// Neighbor row by linear scan: the O(N^2) oracle.
inline int brute_neighbor(const std::vector<VoxelCoord>& coords, std::size_t v, int slot, int dilation) {
  const VoxelCoord want{coords[v].i + (slot / 9 - 1) * dilation, coords[v].j + (slot / 3 % 3 - 1) * dilation,
                        coords[v].k + (slot % 3 - 1) * dilation};
  for (std::size_t u = 0; u < coords.size(); ++u)
    if (coords[u] == want) return static_cast<int>(u);
  return -1;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace testing

#include "codedvtr/finite_diff.hpp"
#include "codedvtr/param_store.hpp"

namespace testing {

using cvtr::BlockCheck;
using cvtr::block_gradcheck;
using cvtr::random_regions;

}  // namespace testing

namespace testing {

// Optimal K-modes cost by enumerating every labeling of the masks with
// `clusters` labels. A group's best centroid takes the per-bit majority, so
// its cost is sum over bits of min(ones, zeros); a forced bit always costs
// the zeros.
inline std::int64_t brute_kmodes_cost(const std::vector<cvtr::OccupancyMask>& masks, int clusters, int bits,
                                      int forced_bit = -1) {
  const std::size_t n = masks.size();
  std::vector<int> label(n, 0);
  std::int64_t best = -1;
  while (true) {
    std::int64_t cost = 0;
    for (int g = 0; g < clusters; ++g) {
      for (int b = 0; b < bits; ++b) {
        std::int64_t ones = 0, zeros = 0;
        for (std::size_t i = 0; i < n; ++i)
          if (label[i] == g) ((masks[i] >> b) & 1u ? ones : zeros) += 1;
        cost += b == forced_bit ? zeros : std::min(ones, zeros);
      }
    }
    if (best < 0 || cost < best) best = cost;
    std::size_t i = 0;
    while (i < n && ++label[i] == clusters) label[i++] = 0;
    if (i == n) break;
  }
  return best;
}

// Samples around four centre-bit masks that are pairwise >= 10 bits apart;
// each non-center bit flips with probability `flip`.
inline std::vector<cvtr::OccupancyMask> generator_masks(std::mt19937_64& rng, std::size_t per_generator,
                                                        double flip = 0.05) {
  std::vector<cvtr::OccupancyMask> gens;
  while (gens.size() < 4) {
    const cvtr::OccupancyMask g = (static_cast<cvtr::OccupancyMask>(rng()) & cvtr::kFullMask) | cvtr::kCenterBit;
    bool far = true;
    for (auto h : gens) far = far && std::popcount(g ^ h) >= 10;
    if (far) gens.push_back(g);
  }
  std::vector<cvtr::OccupancyMask> out;
  for (auto g : gens)
    for (std::size_t s = 0; s < per_generator; ++s) {
      cvtr::OccupancyMask m = g;
      for (int b = 0; b < cvtr::kSlots; ++b)
        if (b != cvtr::kCenterSlot && cvtr::rnd::uniform01(rng) < flip) m ^= 1u << b;
      out.push_back(m);
    }
  return out;
}

}  // namespace testing
