#pragma once

#include <span>
#include <string>
#include <vector>

#include "codedvtr/voxel_grid.hpp"

namespace cvtr::io {

// Labeled scene points. ASCII PLY with `x y z` float and `label` int vertex
// properties, or CSV with a `x,y,z,label` header. Features are left empty.
PointCloud read_scene(const std::string& path);
void write_scene_ply(const std::string& path, const PointCloud& points);
void write_scene_csv(const std::string& path, const PointCloud& points);
// Picks the format from the extension (.ply or .csv).
void write_scene(const std::string& path, const PointCloud& points);

// Per-point integer scalar export: `x y z <property>`.
void write_scalar_ply(const std::string& path, std::span<const std::array<double, 3>> positions,
                      const std::string& property, std::span<const int> values);

std::string read_text(const std::string& path);
void write_text(const std::string& path, const std::string& text);

}  // namespace cvtr::io
