#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "codedvtr/config.hpp"
#include "codedvtr/model.hpp"
#include "codedvtr/train.hpp"

namespace cvtr::diag {

struct LayerEntropy {
  int layer = 0;
  int stage = 0;
  double entropy = 0.0;     // codebook choice w, / ln K
  double entropy_wf = 0.0;  // w_f renormalised to the simplex, / ln K
  double entropy_fp = 0.0;  // |f_p| over valid slots per head, / ln(valid slots)
};

// Mean normalised entropies per block over every voxel of `scenes`.
std::vector<LayerEntropy> layer_entropy_profile(const Model& model, const std::vector<PreparedScene>& scenes);
// Header: layer,entropy,entropy_wf,entropy_fp
std::string entropy_csv(const std::vector<LayerEntropy>& rows);
// Mean of entropy_wf over blocks with index >= first_layer.
double deep_entropy(const std::vector<LayerEntropy>& rows, int first_layer = 1);

enum class ChoiceAxis { shape, dilation };

// Per-voxel argmax of w_f marginalised over the other axis; ties go to the
// lowest index. `fused` is N x (M * D) in codebook order.
std::vector<int> choice_map(std::span<const double> fused, int shapes, int dilations, ChoiceAxis axis);

// Default block for choice exports: the last block running at stride 1.
std::size_t default_choice_layer(const Model& model);

struct ChoiceExport {
  std::vector<std::array<double, 3>> positions;  // voxel centers in meters
  std::vector<int> shape;
  std::vector<int> dilation;
};
ChoiceExport choice_export(const Model& model, const PreparedScene& scene, std::size_t layer);
// Header: x,y,z,choice
std::string choice_csv(const ChoiceExport& e, ChoiceAxis axis);

// A region counts as plane-shaped when its dilation-1 mask lies inside the
// horizontal plane through the center and covers at least 5 of its 9 slots.
bool plane_shaped(OccupancyMask region);

struct AdaptationStats {
  std::vector<std::int64_t> floor_shape_hist;  // shape choices among floor-interior voxels
  int floor_modal_shape = -1;
  bool floor_modal_is_plane = false;
  std::vector<bool> plane_shapes;  // per shape index
  double density_median = 0.0;     // dilation-1 neighbor count
  std::vector<std::int64_t> low_dilation_hist, high_dilation_hist;
  int low_modal_dilation = -1;
  int high_modal_dilation = -1;

  nlohmann::json to_json() const;
};

// Floor-interior voxels carry the floor label (0) and a dilation-1 occupancy
// equal to the horizontal plane. Density is the dilation-1 neighbor count;
// low density is below the median over all voxels of `scenes`.
AdaptationStats geometric_adaptation(const Model& model, const std::vector<PreparedScene>& scenes, std::size_t layer);

struct GapRow {
  std::string config;
  std::size_t corpus_size = 0;
  int epoch = 0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double gap = 0.0;
};
// Header: config,corpus_size,epoch,train_acc,val_acc,gap
std::string gap_csv(const std::vector<GapRow>& rows);
std::vector<GapRow> gap_rows(const std::string& name, std::size_t corpus_size, const TrainReport& report);

// Trainable parameters of a model built from `config` (the codebook only
// fixes region masks, so full-cube regions give the same count).
std::size_t trainable_parameters(const ModelConfig& config);
// Throws ValidationError when the counts differ by more than `tolerance`
// relative to the larger one.
void require_matched_parameters(const ModelConfig& a, const ModelConfig& b, double tolerance = 0.05);
// `reference` with kind replaced by `kind` and stage widths (multiples of
// heads) chosen by coordinate descent to match the reference's parameters.
ModelConfig match_parameters(const ModelConfig& reference, BlockKind kind);

// The learned configuration with w frozen to a seeded random simplex point
// per voxel.
RunConfig random_codebook_config(const RunConfig& learned);

}  // namespace cvtr::diag
