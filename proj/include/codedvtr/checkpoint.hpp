#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include <json.hpp>

#include "codedvtr/model.hpp"
#include "codedvtr/optimizer.hpp"

namespace cvtr {

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

// Layout: 8-byte little-endian header length, compact JSON header (slices,
// model config, embedded codebook and its hash, optimizer hyperparameters,
// seed, free-form `extra`), then the flat store as little-endian f32.
std::string checkpoint_bytes(const Model& model, const AdamConfig& adam, std::uint64_t seed,
                             const nlohmann::json& extra = nlohmann::json::object());
void save_checkpoint(const std::string& path, const Model& model, const AdamConfig& adam, std::uint64_t seed,
                     const nlohmann::json& extra = nlohmann::json::object());

struct LoadedCheckpoint {
  Model model;
  AdamConfig adam;
  std::uint64_t seed = 0;
  nlohmann::json header;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace cvtr
