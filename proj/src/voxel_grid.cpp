#include "codedvtr/voxel_grid.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <string>

#include "codedvtr/error.hpp"
#include "codedvtr/parallel.hpp"

namespace cvtr {

namespace {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::int32_t floor_to_i32(double v, std::size_t point) {
  const double f = std::floor(v);
  if (f < static_cast<double>(std::numeric_limits<std::int32_t>::min()) ||
      f > static_cast<double>(std::numeric_limits<std::int32_t>::max()))
    throw ValidationError("voxelize: point " + std::to_string(point) + " is outside the 32-bit voxel range");
  return static_cast<std::int32_t>(f);
}

int majority_label(std::span<const int> labels) {
  std::map<int, int> votes;
  for (int l : labels) ++votes[l];
  int best = labels.front();
  int best_count = -1;
  for (const auto& [label, count] : votes) {
    if (count > best_count) {
      best = label;
      best_count = count;
    }
  }
  return best;
}

}  // namespace

std::uint64_t hash_coord(VoxelCoord c) {
  const std::uint64_t ij = (static_cast<std::uint64_t>(static_cast<std::uint32_t>(c.i)) << 32) |
                           static_cast<std::uint32_t>(c.j);
  return mix64(ij) ^ mix64(static_cast<std::uint32_t>(c.k) ^ 0x5bd1e995ULL);
}

CoordTable::CoordTable(std::span<const VoxelCoord> coords) {
  std::size_t cap = 16;
  while (cap < coords.size() * 2) cap *= 2;
  slots_.assign(cap, Slot{});
  mask_ = cap - 1;
  for (std::size_t r = 0; r < coords.size(); ++r) {
    std::uint64_t h = hash_coord(coords[r]) & mask_;
    while (slots_[h].value != -1) {
      if (slots_[h].key == coords[r]) throw StructuralError("CoordTable: duplicate coordinate");
      h = (h + 1) & mask_;
    }
    slots_[h] = Slot{coords[r], static_cast<std::int32_t>(r)};
  }
  size_ = coords.size();
}

std::int32_t CoordTable::find(VoxelCoord c) const {
  if (slots_.empty()) return -1;
  std::uint64_t h = hash_coord(c) & mask_;
  while (true) {
    const Slot& s = slots_[h];
    if (s.value == -1) return -1;
    if (s.key == c) return s.value;
    h = (h + 1) & mask_;
  }
}

NeighborOffsets NeighborOffsets::make(int dilation) {
  if (dilation < 1) throw ValidationError("dilation must be >= 1");
  NeighborOffsets n;
  n.dilation = dilation;
  int o = 0;
  for (int a = -1; a <= 1; ++a)
    for (int b = -1; b <= 1; ++b)
      for (int c = -1; c <= 1; ++c) n.offsets[o++] = {a * dilation, b * dilation, c * dilation};
  return n;
}

int popcount(OccupancyMask m) { return std::popcount(m); }

SparseVoxelGrid voxelize(const PointCloud& points, double voxel_size) {
  if (!(voxel_size > 0.0) || !std::isfinite(voxel_size)) throw ValidationError("voxelize: voxel_size must be > 0");
  const std::size_t n = points.size();
  if (n == 0) throw ValidationError("voxelize: no points");
  if (points.features.cols != 0 && points.features.rows != n)
    throw StructuralError("voxelize: feature rows != point count");
  if (!points.labels.empty() && points.labels.size() != n)
    throw StructuralError("voxelize: label count != point count");

  std::vector<VoxelCoord> cell(n);
  for (std::size_t p = 0; p < n; ++p) {
    const auto& xyz = points.positions[p];
    for (double v : xyz)
      if (!std::isfinite(v)) throw ValidationError("voxelize: non-finite coordinate at point " + std::to_string(p));
    cell[p] = {floor_to_i32(xyz[0] / voxel_size, p), floor_to_i32(xyz[1] / voxel_size, p),
               floor_to_i32(xyz[2] / voxel_size, p)};
  }

  const std::size_t channels = points.features.cols;
  const bool has_labels = !points.labels.empty();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (cell[a] != cell[b]) return cell[a] < cell[b];
    if (points.positions[a] != points.positions[b]) return points.positions[a] < points.positions[b];
    const auto fa = points.features.row(a);
    const auto fb = points.features.row(b);
    if (!std::equal(fa.begin(), fa.end(), fb.begin()))
      return std::lexicographical_compare(fa.begin(), fa.end(), fb.begin(), fb.end());
    return has_labels && points.labels[a] < points.labels[b];
  });

  SparseVoxelGrid grid;
  grid.voxel_size = voxel_size;
  grid.stride = 1;
  std::vector<double> sums;
  std::vector<int> group_labels;
  std::size_t begin = 0;
  while (begin < n) {
    std::size_t end = begin;
    while (end < n && cell[order[end]] == cell[order[begin]]) ++end;
    grid.coords.push_back(cell[order[begin]]);
    sums.assign(channels, 0.0);
    group_labels.clear();
    for (std::size_t q = begin; q < end; ++q) {
      const auto f = points.features.row(order[q]);
      for (std::size_t c = 0; c < channels; ++c) sums[c] += f[c];
      if (has_labels) group_labels.push_back(points.labels[order[q]]);
    }
    const double count = static_cast<double>(end - begin);
    for (double& s : sums) s /= count;
    grid.features.data.insert(grid.features.data.end(), sums.begin(), sums.end());
    if (has_labels) grid.labels.push_back(majority_label(group_labels));
    begin = end;
  }
  grid.features.rows = grid.coords.size();
  grid.features.cols = channels;
  return grid;
}

NeighborIndex build_neighbor_index(std::span<const VoxelCoord> coords, const CoordTable& table,
                                   int dilation) {
  const NeighborOffsets offsets = NeighborOffsets::make(dilation);
  NeighborIndex index;
  index.dilation = dilation;
  index.slots.resize(coords.size());
  par::parallel_for(coords.size(), [&](std::size_t v) {
    auto& row = index.slots[v];
    for (int o = 0; o < kSlots; ++o) row[o] = table.find(coords[v] + offsets.offsets[o]);
    row[kCenterSlot] = static_cast<std::int32_t>(v);
  });
  return index;
}

NeighborIndex build_neighbor_index(const SparseVoxelGrid& grid, int dilation) {
  const CoordTable table(grid.coords);
  return build_neighbor_index(grid.coords, table, dilation);
}

std::vector<OccupancyMask> occupancy_masks(const NeighborIndex& index) {
  std::vector<OccupancyMask> masks(index.size());
  for (std::size_t v = 0; v < index.size(); ++v) {
    OccupancyMask m = kCenterBit;
    for (int o = 0; o < kSlots; ++o)
      if (index.slots[v][o] != kAbsent) m |= 1u << o;
    masks[v] = m;
  }
  return masks;
}

Downsampled downsample(const SparseVoxelGrid& grid, int factor) {
  if (factor != 2) throw ValidationError("downsample: only factor 2 is supported");
  const std::size_t n = grid.size();
  std::vector<VoxelCoord> parent_coord(n);
  // Arithmetic shift is floor division by 2 for negative coordinates too.
  for (std::size_t v = 0; v < n; ++v)
    parent_coord[v] = {grid.coords[v].i >> 1, grid.coords[v].j >> 1, grid.coords[v].k >> 1};

  Downsampled out;
  out.grid.coords = parent_coord;
  std::sort(out.grid.coords.begin(), out.grid.coords.end());
  out.grid.coords.erase(std::unique(out.grid.coords.begin(), out.grid.coords.end()), out.grid.coords.end());
  out.grid.stride = grid.stride * 2;
  out.grid.voxel_size = grid.voxel_size;

  const CoordTable table(out.grid.coords);
  const std::size_t m = out.grid.coords.size();
  out.map.coarse_size = m;
  out.map.parent.resize(n);
  for (std::size_t v = 0; v < n; ++v) out.map.parent[v] = table.find(parent_coord[v]);

  const std::size_t channels = grid.features.cols;
  out.grid.features = Matrix(m, channels, -std::numeric_limits<double>::infinity());
  for (std::size_t v = 0; v < n; ++v) {
    auto dst = out.grid.features.row(static_cast<std::size_t>(out.map.parent[v]));
    const auto src = grid.features.row(v);
    for (std::size_t c = 0; c < channels; ++c) dst[c] = std::max(dst[c], src[c]);
  }
  if (!grid.labels.empty()) {
    std::vector<std::vector<int>> votes(m);
    for (std::size_t v = 0; v < n; ++v) votes[out.map.parent[v]].push_back(grid.labels[v]);
    out.grid.labels.resize(m);
    for (std::size_t p = 0; p < m; ++p) out.grid.labels[p] = majority_label(votes[p]);
  }
  return out;
}

Matrix upsample(const Matrix& coarse, const DownsampleMap& map) {
  if (coarse.rows != map.coarse_size) throw StructuralError("upsample: coarse grid does not match mapping");
  Matrix fine(map.parent.size(), coarse.cols);
  for (std::size_t v = 0; v < map.parent.size(); ++v) {
    const auto p = map.parent[v];
    if (p < 0 || static_cast<std::size_t>(p) >= coarse.rows) throw StructuralError("upsample: invalid parent index");
    std::copy_n(coarse.row(static_cast<std::size_t>(p)).begin(), coarse.cols, fine.row(v).begin());
  }
  return fine;
}

}  // namespace cvtr
