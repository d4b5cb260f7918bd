#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "codedvtr/voxel_grid.hpp"

namespace cvtr::patterns {

struct KModesOptions {
  int bits = kSlots;
  // Bit forced to 1 in every centroid (the center voxel); nullopt disables.
  std::optional<int> forced_bit = kCenterSlot;
  int restarts = 10;
  int max_iterations = 100;
  std::uint64_t seed = 0;
};

struct ClusterReport {
  int clusters = 0;
  std::int64_t cost = 0;  // total Hamming distance to assigned centroids
  std::vector<OccupancyMask> centroids;
  std::vector<int> assignment;
  int iterations = 0;
  std::vector<std::int64_t> cost_history;  // after every assignment step
  int restart = 0;                         // restart that produced the result
};

int hamming(OccupancyMask a, OccupancyMask b);

// Lloyd-style K-modes under Hamming distance. Assignment ties go to the
// lowest centroid index; centroid bits are per-bit majorities with ties to 0
// (then the forced bit is set). Best of `restarts` distinct-sample seeds:
// lowest cost, then lowest restart index.
ClusterReport kmodes(std::span<const OccupancyMask> masks, int clusters, const KModesOptions& options);

// Every voxel of every scene (after downsampling to `stride`) contributes its
// occupancy mask at `dilation`; a seeded uniform subsample is taken when
// sample_count is nonzero and smaller than the total. Scenes that end up
// empty are skipped with a message appended to `warnings`.
std::vector<OccupancyMask> collect_patterns(std::span<const SparseVoxelGrid> scenes, int stride, int dilation,
                                            std::size_t sample_count, std::uint64_t seed,
                                            std::vector<std::string>* warnings = nullptr);

struct ElbowResult {
  int best = 0;
  bool saturated = false;  // false: the curve never flattened, best = max of range
  std::vector<int> m_values;
  std::vector<double> costs;
};

// Smallest M with cost(M) - cost(M+1) < threshold * cost(M).
ElbowResult elbow_from_curve(std::span<const int> m_values, std::span<const double> costs, double threshold);
ElbowResult elbow_select(std::span<const OccupancyMask> masks, int m_min, int m_max, double threshold,
                         const KModesOptions& options);

// Mined geometric regions keyed by (stride, dilation). Shape i at dilation j
// lives at regions[stride][j][i]; shape indices are aligned across dilations.
struct RegionCodebook {
  int shapes = 0;     // M
  int dilations = 0;  // D
  std::uint64_t seed = 0;
  std::map<int, std::map<int, std::vector<OccupancyMask>>> regions;
  std::map<int, std::map<int, std::vector<std::int64_t>>> cost_curve;

  bool has_stride(int stride) const { return regions.contains(stride); }
  // K = M * D masks in codebook order k = i * D + j.
  std::vector<OccupancyMask> flat(int stride) const;

  nlohmann::json to_json() const;
  static RegionCodebook from_json(const nlohmann::json& j);
  std::string dump() const;  // canonical serialization
};

struct BuildOptions {
  std::size_t scene_count = 10;     // scenes randomly drawn from the input
  std::size_t sample_count = 4000;  // masks per (stride, dilation)
  int restarts = 10;
  std::uint64_t seed = 0;
};

RegionCodebook build_region_codebook(std::span<const SparseVoxelGrid> scenes, int dilations, int shapes,
                                     std::span<const int> strides, const BuildOptions& options);

// Every region is the full 3x3x3 cube (codebook without geometric regions).
RegionCodebook full_cube_codebook(int shapes, int dilations, std::span<const int> strides);

std::string mask_to_bits(OccupancyMask mask, int bits = kSlots);
OccupancyMask mask_from_bits(const std::string& bits);

// Horizontal plane through the center: slots with zero z offset.
OccupancyMask horizontal_plane_mask();

}  // namespace cvtr::patterns
