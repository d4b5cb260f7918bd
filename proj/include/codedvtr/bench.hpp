#pragma once

#include <cstdint>

#include <json.hpp>

namespace cvtr::bench {

// Neighbor resolution throughput on a random grid of `voxels` voxels
// (27 slot lookups per voxel); `reference` selects the serial
// binary-search kernel instead of the hashed parallel one.
nlohmann::json gather(std::size_t voxels, int repeats, std::uint64_t seed, bool reference = false);

// Coded block forward throughput (C=16, H=2, M=8, D=3).
nlohmann::json block(std::size_t voxels, int repeats, std::uint64_t seed);

// Neighborhood aggregation of the same block; `reference` selects the
// serial kernel. The checksum is the sum of |z| over the output.
nlohmann::json aggregate(std::size_t voxels, int repeats, std::uint64_t seed, bool reference = false);

}  // namespace cvtr::bench
