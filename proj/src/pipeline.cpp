#include "codedvtr/pipeline.hpp"

#include <filesystem>

#include "codedvtr/error.hpp"
#include "codedvtr/scene_io.hpp"

namespace cvtr {

synth::CorpusOptions corpus_options(const DataConfig& data) {
  synth::CorpusOptions o;
  o.scenes = data.scenes;
  o.split = data.split;
  o.seed = data.seed;
  o.voxel_size = data.voxel_size;
  o.half_extent = data.half_extent;
  o.falloff = data.falloff;
  o.surface_density = data.surface_density;
  o.line_density = data.line_density;
  o.volume_density = data.volume_density;
  o.noise = data.noise;
  return o;
}

Dataset load_dataset(const DataConfig& data) {
  Dataset out;
  if (data.scene_dir.empty()) {
    const synth::Corpus corpus = synth::make_corpus(corpus_options(data));
    out.warnings = corpus.warnings;
    for (const auto& s : corpus.train) out.train.push_back(voxelize(synth::generate(s), data.voxel_size));
    for (const auto& s : corpus.val) out.val.push_back(voxelize(synth::generate(s), data.voxel_size));
    return out;
  }
  const std::filesystem::path dir(data.scene_dir);
  const auto manifest = nlohmann::json::parse(io::read_text((dir / "corpus.json").string()), nullptr, false);
  if (manifest.is_discarded() || !manifest.contains("train"))
    throw ValidationError((dir / "corpus.json").string() + ": not a corpus manifest");
  for (const auto& f : manifest["train"])
    out.train.push_back(voxelize(io::read_scene((dir / f.get<std::string>()).string()), data.voxel_size));
  for (const auto& f : manifest.value("val", nlohmann::json::array()))
    out.val.push_back(voxelize(io::read_scene((dir / f.get<std::string>()).string()), data.voxel_size));
  if (out.val.empty()) out.warnings.push_back("corpus has an empty validation set");
  return out;
}

nlohmann::json write_corpus(const std::string& dir, const synth::Corpus& corpus) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest{{"train", nlohmann::json::array()},
                          {"val", nlohmann::json::array()},
                          {"specs", nlohmann::json::array()}};
  auto emit = [&](const std::vector<synth::SceneSpec>& specs, const std::string& part) {
    for (std::size_t i = 0; i < specs.size(); ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "%s_%03zu.ply", part.c_str(), i);
      io::write_scene_ply((std::filesystem::path(dir) / name).string(), synth::generate(specs[i]));
      manifest[part].push_back(name);
      manifest["specs"].push_back(specs[i].to_json());
    }
  };
  emit(corpus.train, "train");
  emit(corpus.val, "val");
  io::write_text((std::filesystem::path(dir) / "corpus.json").string(), manifest.dump(2) + "\n");
  return manifest;
}

std::vector<PreparedScene> prepare_scenes(const std::vector<SparseVoxelGrid>& grids, const ModelConfig& model) {
  std::vector<PreparedScene> out;
  const int max_dilation = model.kind == BlockKind::coded ? model.dilations : 1;
  for (const auto& g : grids) out.push_back(prepare_scene(g, model.stages(), max_dilation));
  return out;
}

std::optional<patterns::RegionCodebook> obtain_codebook(const RunConfig& config, const Dataset& data) {
  if (config.model.kind != BlockKind::coded || !config.model.use_regions) return std::nullopt;
  if (!config.codebook.path.empty()) {
    const auto j = nlohmann::json::parse(io::read_text(config.codebook.path), nullptr, false);
    if (j.is_discarded()) throw ValidationError(config.codebook.path + ": not valid JSON");
    return patterns::RegionCodebook::from_json(j);
  }
  if (data.train.empty()) throw ValidationError("no training scenes to mine geometric regions from");
  patterns::BuildOptions options;
  options.scene_count = config.codebook.scenes;
  options.sample_count = config.codebook.samples;
  options.restarts = config.codebook.restarts;
  options.seed = config.data.seed;
  const auto strides = config.model.strides();
  return patterns::build_region_codebook(data.train, config.model.dilations, config.model.shapes, strides, options);
}

Model build_model(const RunConfig& config, const std::optional<patterns::RegionCodebook>& codebook) {
  Model model(config.model, codebook ? &*codebook : nullptr);
  model.initialize(config.seed);
  return model;
}

}  // namespace cvtr
