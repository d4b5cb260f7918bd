#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "codedvtr/matrix.hpp"
#include "codedvtr/param_store.hpp"
#include "codedvtr/voxel_grid.hpp"

namespace cvtr {

enum class BlockKind { conv, vanilla, coded };

// How the codebook choice w is produced.
enum class ChoiceMode {
  learned,        // softmax of prototype similarities
  frozen_random,  // seeded random simplex point per voxel
  frozen_uniform  // 1 / K everywhere
};

std::string to_string(BlockKind kind);
BlockKind block_kind_from_string(const std::string& s);
std::string to_string(ChoiceMode mode);
ChoiceMode choice_mode_from_string(const std::string& s);

struct BlockSpec {
  BlockKind kind = BlockKind::coded;
  int channels = 16;
  int heads = 2;
  int shapes = 1;     // M
  int dilations = 1;  // D, dilation values 1..D
  bool use_guidance = true;
  bool renormalize = false;  // renormalise w * w' to the simplex
  ChoiceMode choice = ChoiceMode::learned;
  std::uint64_t choice_seed = 0;
  // K = M * D region masks in codebook order k = i * D + j; empty means the
  // full cube for every element.
  std::vector<OccupancyMask> regions;
  double temperature = 1.0;

  int codebook_size() const { return shapes * dilations; }
  // Number of dilation blocks the aggregation runs over.
  int kernel_dilations() const { return kind == BlockKind::coded ? dilations : 1; }
  // Raw-attention parameters exist only where they can influence the output.
  bool has_relation() const {
    return kind == BlockKind::vanilla || (kind == BlockKind::coded && codebook_size() > 1);
  }
};

// Coordinates plus neighbor tables and occupancy masks for dilations
// 1..max_dilation of one resolution level. Immutable once built.
struct LevelGeometry {
  std::vector<VoxelCoord> coords;
  int stride = 1;
  std::vector<NeighborIndex> neighbors;               // dilation d at [d - 1]
  std::vector<std::vector<OccupancyMask>> occupancy;  // dilation d at [d - 1]

  std::size_t size() const { return coords.size(); }
  static LevelGeometry build(std::vector<VoxelCoord> coords, int stride, int max_dilation);
};

// Everything the forward pass keeps for backward and for diagnostics.
// Per-voxel slot tensors are laid out [voxel][dilation block][slot][head].
struct BlockCache {
  Matrix x_hat;                 // normalised input
  std::vector<double> inv_std;  // per voxel
  Matrix u;                     // pre-norm output
  Matrix values;                // g(x) = u W_g
  std::vector<double> p, q;     // u W_f_nbr, u W_f_ctr (N x H)
  std::vector<double> logits;   // raw f(x)
  std::vector<double> w;        // codebook choice (N x K)
  std::vector<double> xi;       // matching degree (N x K)
  std::vector<double> shape_choice, dilation_choice;  // guidance softmaxes (N x M, N x D)
  std::vector<double> guide;    // w' (N x K)
  std::vector<double> fused;    // w_f (N x K)
  std::vector<double> fused_sum;
  std::vector<double> kernel;   // effective attention f_p
  std::vector<double> masked_prototypes;  // K x 27 x H
  Matrix z;                     // aggregated features before W_out
  double temperature = 1.0;
};

class AttentionBlock {
 public:
  AttentionBlock(BlockSpec spec, ParamStore& store, const std::string& prefix);

  const BlockSpec& spec() const { return spec_; }
  void initialize(ParamStore& store, std::mt19937_64& rng) const;
  void set_temperature(ParamStore& store, double temperature) const;

  Matrix forward(const ParamStore& store, const LevelGeometry& level, const Matrix& x,
                 BlockCache* cache = nullptr) const;
  // Accumulates parameter gradients into the store; returns dL/dx.
  Matrix backward(ParamStore& store, const LevelGeometry& level, const BlockCache& cache, const Matrix& dy) const;

  // Raw attention logits f for normalised features u (N x D x 27 x H);
  // ABSENT slots hold 0.
  std::vector<double> raw_attention(const ParamStore& store, const LevelGeometry& level, const Matrix& u) const;

  std::size_t param_begin() const;
  std::size_t param_end() const;

  struct Slices {
    ParamStore::Id ln_gamma = 0, ln_beta = 0;
    ParamStore::Id w_nbr = 0, w_ctr = 0, b_rel = 0;
    ParamStore::Id w_val = 0, w_out = 0;
    ParamStore::Id kernel = 0;  // conv kernel or coded prototypes
    ParamStore::Id temperature = 0;
  };
  const Slices& slices() const { return ids_; }

 private:
  void check_geometry(const LevelGeometry& level, const Matrix& x) const;

  BlockSpec spec_;
  Slices ids_;
  std::size_t first_slice_ = 0;
  std::size_t last_slice_ = 0;
};

// psi: dot product scaled by 1 / sqrt(length).
double similarity(std::span<const double> a, std::span<const double> b);

struct Projection {
  std::vector<double> w;          // K
  std::vector<double> projected;  // D x 27 x H, block j = sum_i w_ij theta_ij
};

// Soft codebook choice for one voxel. `logits` holds D blocks of 27 x H,
// `masked_prototypes` holds K = M * D elements of 27 x H (k = i * D + j);
// element k is compared against the block of its own dilation.
Projection codebook_project(std::span<const double> logits, std::span<const double> masked_prototypes, int shapes,
                            int dilations, int heads);

struct Guidance {
  std::vector<double> xi;         // M x D
  std::vector<double> shape;      // softmax over shapes
  std::vector<double> dilation;   // softmax over dilations
  std::vector<double> weights;    // outer product, M x D
};

// `occupancy[j]` is the voxel's mask at dilation j + 1; `regions` has K
// masks in codebook order. Throws on empty regions.
Guidance geometric_guidance(std::span<const OccupancyMask> occupancy, std::span<const OccupancyMask> regions,
                            int shapes, int dilations, double temperature);

// Elementwise w * w', optionally renormalised.
std::vector<double> fuse_choice(std::span<const double> w, std::span<const double> guide, bool renormalize = false);

// z[v][c] = sum_j sum_o kernel[v][j][o][head(c)] * values[nbr_j(v, o)][c].
Matrix aggregate(const LevelGeometry& level, std::span<const double> kernel, int kernel_dilations, int heads,
                 const Matrix& values);

}  // namespace cvtr
