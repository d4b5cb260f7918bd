#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "codedvtr/attention.hpp"
#include "codedvtr/geo_patterns.hpp"
#include "codedvtr/param_store.hpp"

namespace cvtr {

struct ModelConfig {
  BlockKind kind = BlockKind::coded;
  std::vector<int> channels{16, 32};  // one entry per stage; stage s runs at stride 2^s
  int blocks_per_stage = 1;
  int heads = 2;
  int shapes = 8;     // M
  int dilations = 3;  // D
  bool use_guidance = true;
  bool use_regions = true;  // false: every codebook element covers the full cube
  bool renormalize = false;
  ChoiceMode choice = ChoiceMode::learned;
  double temperature = 1.0;
  std::uint64_t choice_seed = 0;  // frozen-random choices
  int classes = 5;

  int stages() const { return static_cast<int>(channels.size()); }
  std::vector<int> strides() const;
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Input features per voxel: a constant 1 and the voxel center height.
inline constexpr int kInputFeatures = 2;

// Fine rows grouped by coarse parent (CSR, ascending fine rows).
struct PoolMap {
  DownsampleMap map;
  std::vector<std::size_t> begin;  // coarse_size + 1 offsets into rows
  std::vector<std::int32_t> rows;
};

// One scene resolved at every stage: level s holds stride 2^s coordinates,
// pool[s] maps level s rows onto level s + 1 rows.
struct PreparedScene {
  std::vector<LevelGeometry> levels;
  std::vector<PoolMap> pool;
  Matrix input;                                     // level-0 features
  std::vector<int> labels;                          // level-0 labels, -1 when unlabeled
  double voxel_size = 1.0;

  std::size_t size() const { return levels.empty() ? 0 : levels.front().size(); }
};

PreparedScene prepare_scene(const SparseVoxelGrid& grid, int stages, int max_dilation);

struct Linear {
  ParamStore::Id w = 0, b = 0;
  std::size_t in = 0, out = 0;
};

// Everything kept from a forward pass.
struct ModelTrace {
  Matrix stem_pre, stem_out;
  std::vector<Matrix> block_in;  // input of every block, model block order
  std::vector<BlockCache> block_cache;
  std::vector<Matrix> skip;                // encoder outputs per stage
  std::vector<std::vector<std::int32_t>> pool_arg;  // per down step: winning fine row per (coarse row, channel)
  std::vector<Matrix> pooled, down_pre, down_out;
  std::vector<Matrix> concat, up_pre, up_out;  // decoder steps, indexed by target stage
  Matrix head_in, head_pre, head_hidden;
  Matrix logits;
};

class Model {
 public:
  // `codebook` is required for the coded kind with use_regions.
  Model(ModelConfig config, const patterns::RegionCodebook* codebook);

  const ModelConfig& config() const { return config_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }
  const std::vector<AttentionBlock>& blocks() const { return blocks_; }
  // Stage (resolution level) of every block.
  const std::vector<int>& block_stage() const { return block_stage_; }
  const patterns::RegionCodebook& codebook() const { return codebook_; }

  void initialize(std::uint64_t seed);
  void set_temperature(double temperature);

  Matrix forward(const PreparedScene& scene, ModelTrace* trace = nullptr) const;
  // Accumulates parameter gradients for dL/dlogits.
  void backward(const PreparedScene& scene, const ModelTrace& trace, const Matrix& dlogits);

 private:
  Linear add_linear(const std::string& name, std::size_t in, std::size_t out);

  ModelConfig config_;
  patterns::RegionCodebook codebook_;
  ParamStore store_;
  Linear stem_;
  std::vector<Linear> down_;  // down_[s - 1] maps stage s - 1 to stage s
  std::vector<Linear> up_;    // up_[s] fuses stage s + 1 with the stage s skip
  Linear head_hidden_, head_out_;
  std::vector<Linear> linears_;  // every linear map in creation order
  std::vector<AttentionBlock> blocks_;
  std::vector<int> block_stage_;
  // Block indices per encoder stage and per decoder stage.
  std::vector<std::vector<std::size_t>> enc_blocks_, dec_blocks_;
};

// Mean cross-entropy over labeled voxels; `dlogits` receives the gradient
// scaled by 1 / `normalizer` (the labeled count when 0).
struct LossResult {
  double loss_sum = 0.0;
  std::size_t labeled = 0;
  std::size_t correct = 0;
};
LossResult cross_entropy(const Matrix& logits, const std::vector<int>& labels, Matrix* dlogits,
                         double normalizer = 0.0);

std::vector<int> predict(const Matrix& logits);

}  // namespace cvtr
