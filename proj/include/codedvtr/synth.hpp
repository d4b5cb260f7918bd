#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "codedvtr/voxel_grid.hpp"

namespace cvtr::synth {

enum class PrimitiveKind { floor, wall, corner, edge, scatter };
inline constexpr int kNumClasses = 5;

std::string to_string(PrimitiveKind kind);
PrimitiveKind primitive_kind_from_string(const std::string& s);

// An axis-aligned primitive. `origin` is the minimum corner, `extent` the
// size along x, y, z. Walls are one voxel thick along their short axis, poles
// one voxel wide in x and y. Density counts points per unit area for
// surfaces, per unit length for poles and per unit volume for scatter.
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::floor;
  std::array<double, 3> origin{};
  std::array<double, 3> extent{};
  double density = 400.0;
  int label = 0;
};

struct SceneSpec {
  std::vector<Primitive> primitives;
  double falloff = 0.5;  // lambda per meter, radial in xy from the origin
  double noise = 0.0;    // Gaussian jitter sigma in meters
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static SceneSpec from_json(const nlohmann::json& j);
};

// Labeled points: candidates are drawn uniformly over each primitive and kept
// with probability exp(-falloff * r). Throws ValidationError on degenerate
// extents or bad labels.
PointCloud generate(const SceneSpec& spec);

struct CorpusOptions {
  std::size_t scenes = 8;
  double split = 0.75;  // fraction of scenes in the training set
  std::uint64_t seed = 0;
  double voxel_size = 0.15;
  double half_extent = 2.4;  // floor spans [-half_extent, half_extent]^2
  double falloff = 0.5;
  double noise = 0.01;
  int min_primitives = 4;  // besides the floor
  int max_primitives = 8;
  // Sampling weights for wall, corner, edge, scatter.
  std::array<double, 4> kind_weights{0.3, 0.25, 0.2, 0.25};
  // About two points per voxel face at the center, so the falloff thins
  // occupancy itself and not only the point count.
  double surface_density = 100.0;  // per m^2
  double line_density = 20.0;      // per m
  double volume_density = 130.0;   // per m^3
};

// One random scene: a floor plus min..max primitives drawn from the kind
// weights, with coordinates placed on voxel centers.
SceneSpec random_scene(std::uint64_t seed, const CorpusOptions& options);

struct Corpus {
  std::vector<SceneSpec> train;
  std::vector<SceneSpec> val;
  std::vector<std::string> warnings;
};

// Scene i gets seed combine(options.seed, i); the first round(split * n)
// scenes form the training set.
Corpus make_corpus(const CorpusOptions& options);

}  // namespace cvtr::synth
