#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "codedvtr/model.hpp"
#include "codedvtr/optimizer.hpp"
#include "codedvtr/train.hpp"

namespace cvtr {

struct DataConfig {
  std::size_t scenes = 8;
  double split = 0.75;
  std::uint64_t seed = 0;  // corpus seed, independent of the model seed
  double voxel_size = 0.15;
  double half_extent = 2.4;
  double falloff = 0.5;
  double surface_density = 100.0;  // points per m^2, m and m^3 by primitive dimension
  double line_density = 20.0;
  double volume_density = 130.0;
  double noise = 0.01;
  std::string scene_dir;  // when set, scenes come from <dir>/corpus.json instead of the generator
};

struct CodebookConfig {
  std::string path;  // existing codebook JSON; empty = mine one from the training scenes
  std::size_t scenes = 10;
  std::size_t samples = 4000;
  int restarts = 10;
};

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  AdamConfig optimizer;
  TrainConfig train;
  DataConfig data;
  CodebookConfig codebook;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

// "a.b.c=value": value is parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& root, const std::string& assignment);

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);

nlohmann::json adam_to_json(const AdamConfig& c);
AdamConfig adam_from_json(const nlohmann::json& j);

}  // namespace cvtr
