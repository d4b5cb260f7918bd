#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "codedvtr/matrix.hpp"

namespace cvtr {

struct VoxelCoord {
  std::int32_t i = 0;
  std::int32_t j = 0;
  std::int32_t k = 0;

  auto operator<=>(const VoxelCoord&) const = default;
};

inline VoxelCoord operator+(VoxelCoord a, VoxelCoord b) { return {a.i + b.i, a.j + b.j, a.k + b.k}; }

// 64-bit mixing hash over the full 96-bit coordinate (splitmix64 finaliser
// applied to the packed (i, j) word, xor-folded with the mixed k). It is only
// an index accelerator: CoordTable always compares full coordinates.
std::uint64_t hash_coord(VoxelCoord c);

// Open-addressing coordinate -> row index table with linear probing.
class CoordTable {
 public:
  CoordTable() = default;
  explicit CoordTable(std::span<const VoxelCoord> coords);

  // Row index of `c`, or -1.
  std::int32_t find(VoxelCoord c) const;
  std::size_t size() const { return size_; }

 private:
  struct Slot {
    VoxelCoord key;
    std::int32_t value = -1;
  };
  std::vector<Slot> slots_;
  std::uint64_t mask_ = 0;
  std::size_t size_ = 0;
};

inline constexpr int kSlots = 27;
inline constexpr int kCenterSlot = 13;
inline constexpr std::int32_t kAbsent = -1;

// Slot o of offset (a, b, c) in {-1,0,1}^3 is (a+1)*9 + (b+1)*3 + (c+1):
// lexicographic with z fastest. Slot 26 - o holds the negated offset.
constexpr int opposite_slot(int slot) { return kSlots - 1 - slot; }

struct NeighborOffsets {
  int dilation = 1;
  std::array<VoxelCoord, kSlots> offsets{};

  static NeighborOffsets make(int dilation);
};

// Bit o set iff neighbor slot o is occupied.
using OccupancyMask = std::uint32_t;
inline constexpr OccupancyMask kFullMask = (1u << kSlots) - 1;
inline constexpr OccupancyMask kCenterBit = 1u << kCenterSlot;

struct PointCloud {
  std::vector<std::array<double, 3>> positions;
  Matrix features;          // one row per point (may have zero columns)
  std::vector<int> labels;  // empty or one per point

  std::size_t size() const { return positions.size(); }
};

struct SparseVoxelGrid {
  std::vector<VoxelCoord> coords;  // unique, lexicographic order
  Matrix features;                 // coords.size() rows
  std::vector<int> labels;         // empty or coords.size()
  int stride = 1;
  double voxel_size = 1.0;

  std::size_t size() const { return coords.size(); }
};

// coord = floor(xyz / voxel_size). Duplicates merge by feature mean (summed in
// a canonical order so any input permutation yields identical bits) and by
// majority label, ties to the smallest class id.
SparseVoxelGrid voxelize(const PointCloud& points, double voxel_size);

struct NeighborIndex {
  int dilation = 1;
  std::vector<std::array<std::int32_t, kSlots>> slots;  // row index or kAbsent

  std::size_t size() const { return slots.size(); }
};

NeighborIndex build_neighbor_index(std::span<const VoxelCoord> coords, const CoordTable& table,
                                   int dilation);
NeighborIndex build_neighbor_index(const SparseVoxelGrid& grid, int dilation);

std::vector<OccupancyMask> occupancy_masks(const NeighborIndex& index);

// Fine row -> coarse row mapping produced by downsample.
struct DownsampleMap {
  std::vector<std::int32_t> parent;
  std::size_t coarse_size = 0;
};

struct Downsampled {
  SparseVoxelGrid grid;
  DownsampleMap map;
};

// child coord = floor(coord / 2); features merged by per-channel max.
Downsampled downsample(const SparseVoxelGrid& grid, int factor = 2);

// Nearest-ancestor copy of coarse rows onto the fine grid.
Matrix upsample(const Matrix& coarse, const DownsampleMap& map);

int popcount(OccupancyMask m);

}  // namespace cvtr
