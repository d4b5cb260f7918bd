#include "codedvtr/reference.hpp"

#include <algorithm>
#include <numeric>

#include "codedvtr/error.hpp"

namespace cvtr::reference {

namespace {

struct SortedCoords {
  std::vector<VoxelCoord> coords;
  std::vector<std::int32_t> rows;

  explicit SortedCoords(std::span<const VoxelCoord> input) {
    std::vector<std::int32_t> order(input.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::int32_t a, std::int32_t b) { return input[a] < input[b]; });
    for (std::int32_t r : order) {
      coords.push_back(input[r]);
      rows.push_back(r);
    }
  }

  std::int32_t find(VoxelCoord c) const {
    const auto it = std::lower_bound(coords.begin(), coords.end(), c);
    if (it == coords.end() || *it != c) return kAbsent;
    return rows[static_cast<std::size_t>(it - coords.begin())];
  }
};

VoxelCoord offset(int slot, int dilation) {
  return {(slot / 9 - 1) * dilation, (slot / 3 % 3 - 1) * dilation, (slot % 3 - 1) * dilation};
}

}  // namespace

NeighborIndex neighbor_index(std::span<const VoxelCoord> coords, int dilation) {
  if (dilation < 1) throw ValidationError("dilation must be >= 1");
  const SortedCoords sorted(coords);
  NeighborIndex index;
  index.dilation = dilation;
  index.slots.resize(coords.size());
  for (std::size_t v = 0; v < coords.size(); ++v)
    for (int o = 0; o < kSlots; ++o) index.slots[v][o] = sorted.find(coords[v] + offset(o, dilation));
  return index;
}

Matrix masked_conv(std::span<const VoxelCoord> coords, std::span<const double> kernel, int heads, int dilation,
                   const Matrix& values) {
  const auto h_count = static_cast<std::size_t>(heads);
  if (kernel.size() != kSlots * h_count || values.rows != coords.size() || values.cols % h_count != 0)
    throw StructuralError("masked_conv: shape mismatch");
  const std::size_t head_width = values.cols / h_count;
  const SortedCoords sorted(coords);
  Matrix out(values.rows, values.cols);
  for (std::size_t v = 0; v < coords.size(); ++v)
    for (int o = 0; o < kSlots; ++o) {
      const std::int32_t n = sorted.find(coords[v] + offset(o, dilation));
      if (n < 0) continue;
      for (std::size_t c = 0; c < values.cols; ++c)
        out(v, c) += kernel[o * h_count + c / head_width] * values(static_cast<std::size_t>(n), c);
    }
  return out;
}

Matrix aggregate(std::span<const VoxelCoord> coords, std::span<const double> kernel, int dilations, int heads,
                 const Matrix& values) {
  const auto h_count = static_cast<std::size_t>(heads);
  const std::size_t block = kSlots * h_count;
  if (kernel.size() != coords.size() * dilations * block || values.rows != coords.size())
    throw StructuralError("aggregate: shape mismatch");
  const std::size_t head_width = values.cols / h_count;
  const SortedCoords sorted(coords);
  Matrix out(values.rows, values.cols);
  for (std::size_t v = 0; v < coords.size(); ++v)
    for (int j = 0; j < dilations; ++j)
      for (int o = 0; o < kSlots; ++o) {
        const std::int32_t n = sorted.find(coords[v] + offset(o, j + 1));
        if (n < 0) continue;
        const double* kv = kernel.data() + (v * dilations + j) * block + o * h_count;
        for (std::size_t c = 0; c < values.cols; ++c) out(v, c) += kv[c / head_width] * values(static_cast<std::size_t>(n), c);
      }
  return out;
}

}  // namespace cvtr::reference
