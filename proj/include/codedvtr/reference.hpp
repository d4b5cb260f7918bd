#pragma once

#include <span>
#include <vector>

#include "codedvtr/matrix.hpp"
#include "codedvtr/voxel_grid.hpp"

// Straightforward single-threaded versions of the hot kernels. They share no
// code with the parallel ones and exist for cross-checking and benchmarking.
namespace cvtr::reference {

// Neighbor resolution by binary search over a sorted copy of the coordinates.
NeighborIndex neighbor_index(std::span<const VoxelCoord> coords, int dilation);

// 27-tap masked convolution of per-head `values` with one shared kernel
// (27 x H, slot-major), absent neighbors skipped.
Matrix masked_conv(std::span<const VoxelCoord> coords, std::span<const double> kernel, int heads, int dilation,
                   const Matrix& values);

// Same aggregation with a per-voxel kernel laid out [voxel][dilation][slot][head],
// dilation blocks 1..D.
Matrix aggregate(std::span<const VoxelCoord> coords, std::span<const double> kernel, int dilations, int heads,
                 const Matrix& values);

}  // namespace cvtr::reference
