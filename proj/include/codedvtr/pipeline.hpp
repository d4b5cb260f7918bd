#pragma once

#include <optional>
#include <string>
#include <vector>

#include "codedvtr/config.hpp"
#include "codedvtr/geo_patterns.hpp"
#include "codedvtr/model.hpp"
#include "codedvtr/synth.hpp"

namespace cvtr {

struct Dataset {
  std::vector<SparseVoxelGrid> train;
  std::vector<SparseVoxelGrid> val;
  std::vector<std::string> warnings;
};

synth::CorpusOptions corpus_options(const DataConfig& data);

// Generated corpus, or the scenes listed in <scene_dir>/corpus.json.
Dataset load_dataset(const DataConfig& data);

// Writes <dir>/corpus.json plus one PLY per scene; returns the manifest.
nlohmann::json write_corpus(const std::string& dir, const synth::Corpus& corpus);

std::vector<PreparedScene> prepare_scenes(const std::vector<SparseVoxelGrid>& grids, const ModelConfig& model);

// The codebook a run needs: loaded from config.codebook.path, mined from the
// training scenes, or nullopt when the model does not use regions.
std::optional<patterns::RegionCodebook> obtain_codebook(const RunConfig& config, const Dataset& data);

// Constructs and initialises the model from the run seed.
Model build_model(const RunConfig& config, const std::optional<patterns::RegionCodebook>& codebook);

}  // namespace cvtr
