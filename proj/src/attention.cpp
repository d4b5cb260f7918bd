#include "codedvtr/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "codedvtr/error.hpp"
#include "codedvtr/numerics.hpp"
#include "codedvtr/parallel.hpp"
#include "codedvtr/random.hpp"

namespace cvtr {

namespace {

constexpr double kNormEps = 1e-5;

double region_size(OccupancyMask region) {
  const int n = popcount(region);
  if (n == 0) throw StructuralError("geometric region with popcount 0");
  return static_cast<double>(n);
}

// Matching degree, shape/dilation softmaxes and their outer product for one
// voxel, written into caller-provided spans.
void guidance_into(std::span<const OccupancyMask> occupancy, std::span<const OccupancyMask> regions, int shapes,
                   int dilations, double temperature, std::span<double> xi, std::span<double> shape,
                   std::span<double> dilation, std::span<double> weights) {
  for (int i = 0; i < shapes; ++i)
    for (int j = 0; j < dilations; ++j) {
      const OccupancyMask r = regions[static_cast<std::size_t>(i * dilations + j)];
      xi[static_cast<std::size_t>(i * dilations + j)] = popcount(occupancy[j] & r) / region_size(r);
    }
  for (int i = 0; i < shapes; ++i) {
    double s = 0.0;
    for (int j = 0; j < dilations; ++j) s += xi[static_cast<std::size_t>(i * dilations + j)];
    shape[i] = s / temperature;
  }
  for (int j = 0; j < dilations; ++j) {
    double s = 0.0;
    for (int i = 0; i < shapes; ++i) s += xi[static_cast<std::size_t>(i * dilations + j)];
    dilation[j] = s / temperature;
  }
  softmax_inplace(shape);
  softmax_inplace(dilation);
  for (int i = 0; i < shapes; ++i)
    for (int j = 0; j < dilations; ++j) weights[static_cast<std::size_t>(i * dilations + j)] = shape[i] * dilation[j];
}

void random_simplex(std::uint64_t seed, VoxelCoord coord, int stride, std::span<double> out) {
  std::mt19937_64 rng(rnd::combine(seed, hash_coord(coord) ^ static_cast<std::uint64_t>(stride)));
  double total = 0.0;
  for (double& x : out) {
    double u = rnd::uniform01(rng);
    while (u <= 0.0) u = rnd::uniform01(rng);
    x = -std::log(u);
    total += x;
  }
  for (double& x : out) x /= total;
}

}  // namespace

std::string to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::conv: return "conv";
    case BlockKind::vanilla: return "vanilla-attention";
    case BlockKind::coded: return "coded";
  }
  return "coded";
}

BlockKind block_kind_from_string(const std::string& s) {
  if (s == "conv") return BlockKind::conv;
  if (s == "vanilla-attention" || s == "vanilla") return BlockKind::vanilla;
  if (s == "coded") return BlockKind::coded;
  throw ValidationError("unknown block kind '" + s + "'");
}

std::string to_string(ChoiceMode mode) {
  switch (mode) {
    case ChoiceMode::learned: return "learned";
    case ChoiceMode::frozen_random: return "frozen-random";
    case ChoiceMode::frozen_uniform: return "frozen-uniform";
  }
  return "learned";
}

ChoiceMode choice_mode_from_string(const std::string& s) {
  if (s == "learned") return ChoiceMode::learned;
  if (s == "frozen-random") return ChoiceMode::frozen_random;
  if (s == "frozen-uniform") return ChoiceMode::frozen_uniform;
  throw ValidationError("unknown choice mode '" + s + "'");
}

LevelGeometry LevelGeometry::build(std::vector<VoxelCoord> coords, int stride, int max_dilation) {
  LevelGeometry level;
  level.coords = std::move(coords);
  level.stride = stride;
  const CoordTable table(level.coords);
  for (int d = 1; d <= max_dilation; ++d) {
    level.neighbors.push_back(build_neighbor_index(level.coords, table, d));
    level.occupancy.push_back(occupancy_masks(level.neighbors.back()));
  }
  return level;
}

double similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw StructuralError("similarity: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s / std::sqrt(static_cast<double>(a.size()));
}

Projection codebook_project(std::span<const double> logits, std::span<const double> masked_prototypes, int shapes,
                            int dilations, int heads) {
  const std::size_t slot_block = static_cast<std::size_t>(kSlots * heads);
  const std::size_t k_total = static_cast<std::size_t>(shapes * dilations);
  if (logits.size() != slot_block * dilations || masked_prototypes.size() != slot_block * k_total)
    throw StructuralError("codebook_project: shape mismatch");
  Projection p;
  p.w.resize(k_total);
  for (std::size_t k = 0; k < k_total; ++k) {
    const std::size_t j = k % static_cast<std::size_t>(dilations);
    p.w[k] = similarity(masked_prototypes.subspan(k * slot_block, slot_block), logits.subspan(j * slot_block, slot_block));
    if (!std::isfinite(p.w[k])) throw NumericalError("codebook_project: non-finite logits");
  }
  softmax_inplace(p.w);
  p.projected.assign(slot_block * dilations, 0.0);
  for (std::size_t k = 0; k < k_total; ++k) {
    const std::size_t j = k % static_cast<std::size_t>(dilations);
    for (std::size_t t = 0; t < slot_block; ++t)
      p.projected[j * slot_block + t] += p.w[k] * masked_prototypes[k * slot_block + t];
  }
  return p;
}

Guidance geometric_guidance(std::span<const OccupancyMask> occupancy, std::span<const OccupancyMask> regions,
                            int shapes, int dilations, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("geometric_guidance: temperature must be > 0");
  if (occupancy.size() != static_cast<std::size_t>(dilations) ||
      regions.size() != static_cast<std::size_t>(shapes * dilations))
    throw StructuralError("geometric_guidance: shape mismatch");
  Guidance g;
  g.xi.resize(regions.size());
  g.shape.resize(static_cast<std::size_t>(shapes));
  g.dilation.resize(static_cast<std::size_t>(dilations));
  g.weights.resize(regions.size());
  guidance_into(occupancy, regions, shapes, dilations, temperature, g.xi, g.shape, g.dilation, g.weights);
  return g;
}

std::vector<double> fuse_choice(std::span<const double> w, std::span<const double> guide, bool renormalize) {
  if (w.size() != guide.size()) throw StructuralError("fuse_choice: size mismatch");
  std::vector<double> out(w.size());
  double total = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    out[k] = w[k] * guide[k];
    total += out[k];
  }
  if (renormalize && total > 0.0)
    for (double& x : out) x /= total;
  return out;
}

Matrix aggregate(const LevelGeometry& level, std::span<const double> kernel, int kernel_dilations, int heads,
                 const Matrix& values) {
  const std::size_t n = level.size();
  const std::size_t c_total = values.cols;
  const std::size_t head_width = c_total / static_cast<std::size_t>(heads);
  const std::size_t h_count = static_cast<std::size_t>(heads);
  if (kernel.size() != n * kernel_dilations * kSlots * h_count || values.rows != n)
    throw StructuralError("aggregate: shape mismatch");
  Matrix z(n, c_total);
  par::parallel_for(n, [&](std::size_t v) {
    double* zr = z.data.data() + v * c_total;
    for (int j = 0; j < kernel_dilations; ++j) {
      const auto& slots = level.neighbors[j].slots[v];
      const double* kv = kernel.data() + (v * kernel_dilations + j) * kSlots * h_count;
      for (int o = 0; o < kSlots; ++o) {
        const std::int32_t nb = slots[o];
        if (nb < 0) continue;
        const double* g = values.data.data() + static_cast<std::size_t>(nb) * c_total;
        for (std::size_t h = 0; h < h_count; ++h) {
          const double a = kv[o * h_count + h];
          for (std::size_t c = h * head_width; c < (h + 1) * head_width; ++c) zr[c] += a * g[c];
        }
      }
    }
  });
  return z;
}

AttentionBlock::AttentionBlock(BlockSpec spec, ParamStore& store, const std::string& prefix) : spec_(std::move(spec)) {
  if (spec_.channels < 1 || spec_.heads < 1 || spec_.channels % spec_.heads != 0)
    throw ValidationError("block: channels must be a positive multiple of heads");
  if (spec_.kind != BlockKind::coded) {
    spec_.shapes = 1;
    spec_.dilations = 1;
    spec_.regions.clear();
  }
  if (spec_.shapes < 1 || spec_.dilations < 1) throw ValidationError("block: M and D must be >= 1");
  if (!(spec_.temperature > 0.0)) throw ValidationError("block: temperature must be > 0");
  const auto k_total = static_cast<std::size_t>(spec_.codebook_size());
  if (spec_.regions.empty()) spec_.regions.assign(k_total, kFullMask);
  if (spec_.regions.size() != k_total) throw StructuralError("block: region count must equal M * D");
  for (OccupancyMask r : spec_.regions) region_size(r);

  const auto c = static_cast<std::size_t>(spec_.channels);
  const auto h = static_cast<std::size_t>(spec_.heads);
  first_slice_ = store.slices().size();
  ids_.ln_gamma = store.add(prefix + ".ln_gamma", {c});
  ids_.ln_beta = store.add(prefix + ".ln_beta", {c});
  if (spec_.has_relation()) {
    ids_.w_nbr = store.add(prefix + ".w_f_nbr", {c, h});
    ids_.w_ctr = store.add(prefix + ".w_f_ctr", {c, h});
    ids_.b_rel = store.add(prefix + ".b_f", {static_cast<std::size_t>(kSlots), h});
  }
  ids_.w_val = store.add(prefix + ".w_g", {c, c});
  ids_.w_out = store.add(prefix + ".w_out", {c, c});
  if (spec_.kind == BlockKind::conv) ids_.kernel = store.add(prefix + ".kernel", {static_cast<std::size_t>(kSlots), h});
  if (spec_.kind == BlockKind::coded) {
    ids_.kernel = store.add(prefix + ".prototypes", {k_total, static_cast<std::size_t>(kSlots), h});
    ids_.temperature = store.add(prefix + ".temperature", {1}, /*trainable=*/false);
  }
  last_slice_ = store.slices().size();
}

std::size_t AttentionBlock::param_begin() const { return first_slice_; }
std::size_t AttentionBlock::param_end() const { return last_slice_; }

void AttentionBlock::initialize(ParamStore& store, std::mt19937_64& rng) const {
  const double c = spec_.channels;
  const double linear_bound = 1.0 / std::sqrt(c);
  const double proto_std = 1.0 / std::sqrt(static_cast<double>(kSlots * spec_.heads));
  std::ranges::fill(store.values(ids_.ln_gamma), 1.0);
  std::ranges::fill(store.values(ids_.ln_beta), 0.0);
  auto uniform_fill = [&](ParamStore::Id id) {
    for (double& x : store.values(id)) x = rnd::uniform(rng, -linear_bound, linear_bound);
  };
  if (spec_.has_relation()) {
    uniform_fill(ids_.w_nbr);
    uniform_fill(ids_.w_ctr);
    std::ranges::fill(store.values(ids_.b_rel), 0.0);
  }
  uniform_fill(ids_.w_val);
  uniform_fill(ids_.w_out);
  if (spec_.kind != BlockKind::vanilla)
    for (double& x : store.values(ids_.kernel)) x = proto_std * rnd::normal(rng);
  if (spec_.kind == BlockKind::coded) store.values(ids_.temperature)[0] = spec_.temperature;
}

void AttentionBlock::set_temperature(ParamStore& store, double temperature) const {
  if (spec_.kind != BlockKind::coded) return;
  if (!(temperature > 0.0)) throw ValidationError("temperature must be > 0");
  store.values(ids_.temperature)[0] = temperature;
}

void AttentionBlock::check_geometry(const LevelGeometry& level, const Matrix& x) const {
  if (x.cols != static_cast<std::size_t>(spec_.channels))
    throw StructuralError("block: input has " + std::to_string(x.cols) + " channels, expected " +
                          std::to_string(spec_.channels));
  if (x.rows != level.size()) throw StructuralError("block: feature rows do not match the level");
  const int needed = spec_.kind == BlockKind::coded ? spec_.dilations : 1;
  if (static_cast<int>(level.neighbors.size()) < needed || static_cast<int>(level.occupancy.size()) < needed)
    throw StructuralError("block: level lacks neighbor indices for all dilations");
}

std::vector<double> AttentionBlock::raw_attention(const ParamStore& store, const LevelGeometry& level,
                                                  const Matrix& u) const {
  check_geometry(level, u);
  const std::size_t n = level.size();
  const std::size_t h_count = static_cast<std::size_t>(spec_.heads);
  const int dk = spec_.kernel_dilations();
  const std::size_t block = static_cast<std::size_t>(dk) * kSlots * h_count;
  std::vector<double> f(n * block, 0.0);
  if (!spec_.has_relation()) return f;
  const Matrix p = linalg::matmul(u, store.values(ids_.w_nbr), h_count);
  const Matrix q = linalg::matmul(u, store.values(ids_.w_ctr), h_count);
  const auto bias = store.values(ids_.b_rel);
  par::parallel_for(n, [&](std::size_t v) {
    for (int j = 0; j < dk; ++j) {
      const auto& slots = level.neighbors[j].slots[v];
      double* fr = f.data() + v * block + static_cast<std::size_t>(j) * kSlots * h_count;
      for (int o = 0; o < kSlots; ++o) {
        const std::int32_t nb = slots[o];
        if (nb < 0) continue;
        for (std::size_t h = 0; h < h_count; ++h)
          fr[o * h_count + h] = p(static_cast<std::size_t>(nb), h) + q(v, h) + bias[o * h_count + h];
      }
    }
  });
  return f;
}

Matrix AttentionBlock::forward(const ParamStore& store, const LevelGeometry& level, const Matrix& x,
                               BlockCache* cache) const {
  check_geometry(level, x);
  BlockCache local;
  BlockCache& c = cache ? *cache : local;
  const std::size_t n = level.size();
  const std::size_t ch = static_cast<std::size_t>(spec_.channels);
  const std::size_t h_count = static_cast<std::size_t>(spec_.heads);
  const int dk = spec_.kernel_dilations();
  const std::size_t slot_block = kSlots * h_count;
  const std::size_t block = static_cast<std::size_t>(dk) * slot_block;

  // Pre-norm.
  c.x_hat = Matrix(n, ch);
  c.u = Matrix(n, ch);
  c.inv_std.assign(n, 0.0);
  const auto gamma = store.values(ids_.ln_gamma);
  const auto beta = store.values(ids_.ln_beta);
  par::parallel_for(n, [&](std::size_t v) {
    const auto xr = x.row(v);
    double mean = 0.0;
    for (double a : xr) mean += a;
    mean /= static_cast<double>(ch);
    double var = 0.0;
    for (double a : xr) var += (a - mean) * (a - mean);
    var /= static_cast<double>(ch);
    const double inv = 1.0 / std::sqrt(var + kNormEps);
    c.inv_std[v] = inv;
    for (std::size_t k = 0; k < ch; ++k) {
      c.x_hat(v, k) = (xr[k] - mean) * inv;
      c.u(v, k) = gamma[k] * c.x_hat(v, k) + beta[k];
    }
  });

  c.values = linalg::matmul(c.u, store.values(ids_.w_val), ch);
  if (spec_.has_relation()) c.logits = raw_attention(store, level, c.u);
  else c.logits.clear();

  c.kernel.assign(n * block, 0.0);
  if (spec_.kind == BlockKind::conv) {
    const auto kernel = store.values(ids_.kernel);
    par::parallel_for(n, [&](std::size_t v) { std::ranges::copy(kernel, c.kernel.begin() + v * block); });
  } else if (spec_.kind == BlockKind::vanilla) {
    par::parallel_for(n, [&](std::size_t v) {
      const auto& slots = level.neighbors[0].slots[v];
      const double* f = c.logits.data() + v * block;
      double* e = c.kernel.data() + v * block;
      for (std::size_t h = 0; h < h_count; ++h) {
        double peak = -INFINITY;
        for (int o = 0; o < kSlots; ++o)
          if (slots[o] >= 0) peak = std::max(peak, f[o * h_count + h]);
        double total = 0.0;
        for (int o = 0; o < kSlots; ++o)
          if (slots[o] >= 0) total += (e[o * h_count + h] = std::exp(f[o * h_count + h] - peak));
        for (int o = 0; o < kSlots; ++o) e[o * h_count + h] /= total;
      }
    });
  } else {
    const int m_count = spec_.shapes;
    const int d_count = spec_.dilations;
    const std::size_t k_total = static_cast<std::size_t>(spec_.codebook_size());
    const double temperature = store.values(ids_.temperature)[0];
    if (!(temperature > 0.0)) throw ValidationError("block: temperature must be > 0");
    c.temperature = temperature;
    const auto prototypes = store.values(ids_.kernel);
    c.masked_prototypes.assign(k_total * slot_block, 0.0);
    for (std::size_t k = 0; k < k_total; ++k)
      for (int o = 0; o < kSlots; ++o)
        if ((spec_.regions[k] >> o) & 1u)
          for (std::size_t h = 0; h < h_count; ++h)
            c.masked_prototypes[k * slot_block + o * h_count + h] = prototypes[k * slot_block + o * h_count + h];

    c.w.assign(n * k_total, 0.0);
    c.xi.assign(n * k_total, 0.0);
    c.guide.assign(n * k_total, 0.0);
    c.fused.assign(n * k_total, 0.0);
    c.fused_sum.assign(n, 1.0);
    c.shape_choice.assign(n * m_count, 0.0);
    c.dilation_choice.assign(n * d_count, 0.0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(slot_block));
    std::vector<char> bad(n, 0);
    par::parallel_for(n, [&](std::size_t v) {
      std::span<double> w(c.w.data() + v * k_total, k_total);
      if (k_total == 1) {
        w[0] = 1.0;
      } else if (spec_.choice == ChoiceMode::learned) {
        const double* f = c.logits.data() + v * block;
        for (std::size_t k = 0; k < k_total; ++k) {
          const std::size_t j = k % static_cast<std::size_t>(d_count);
          const double* th = c.masked_prototypes.data() + k * slot_block;
          const double* fj = f + j * slot_block;
          double s = 0.0;
          for (std::size_t t = 0; t < slot_block; ++t) s += th[t] * fj[t];
          w[k] = s * scale;
          if (!std::isfinite(w[k])) bad[v] = 1;
        }
        if (!bad[v]) softmax_inplace(w);
      } else if (spec_.choice == ChoiceMode::frozen_random) {
        random_simplex(spec_.choice_seed, level.coords[v], level.stride, w);
      } else {
        std::ranges::fill(w, 1.0 / static_cast<double>(k_total));
      }

      OccupancyMask occ[32];
      for (int j = 0; j < d_count; ++j) occ[j] = level.occupancy[j][v];
      std::span<double> guide(c.guide.data() + v * k_total, k_total);
      guidance_into(std::span<const OccupancyMask>(occ, static_cast<std::size_t>(d_count)), spec_.regions, m_count,
                    d_count, temperature, std::span<double>(c.xi.data() + v * k_total, k_total),
                    std::span<double>(c.shape_choice.data() + v * m_count, static_cast<std::size_t>(m_count)),
                    std::span<double>(c.dilation_choice.data() + v * d_count, static_cast<std::size_t>(d_count)),
                    guide);

      std::span<double> fused(c.fused.data() + v * k_total, k_total);
      double total = 0.0;
      for (std::size_t k = 0; k < k_total; ++k) {
        fused[k] = spec_.use_guidance ? w[k] * guide[k] : w[k];
        total += fused[k];
      }
      if (spec_.renormalize) {
        c.fused_sum[v] = total;
        for (double& a : fused) a /= total;
      }

      double* e = c.kernel.data() + v * block;
      for (std::size_t k = 0; k < k_total; ++k) {
        const std::size_t j = k % static_cast<std::size_t>(d_count);
        const double* th = c.masked_prototypes.data() + k * slot_block;
        for (std::size_t t = 0; t < slot_block; ++t) e[j * slot_block + t] += fused[k] * th[t];
      }
    });
    for (std::size_t v = 0; v < n; ++v)
      if (bad[v]) throw NumericalError("codebook projection: non-finite logits at voxel " + std::to_string(v));
  }

  c.z = aggregate(level, c.kernel, dk, spec_.heads, c.values);
  Matrix y = linalg::matmul(c.z, store.values(ids_.w_out), ch);
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += x.data[i];
  return y;
}

Matrix AttentionBlock::backward(ParamStore& store, const LevelGeometry& level, const BlockCache& c,
                                const Matrix& dy) const {
  const std::size_t n = level.size();
  const std::size_t ch = static_cast<std::size_t>(spec_.channels);
  const std::size_t h_count = static_cast<std::size_t>(spec_.heads);
  const std::size_t head_width = ch / h_count;
  const int dk = spec_.kernel_dilations();
  const std::size_t slot_block = kSlots * h_count;
  const std::size_t block = static_cast<std::size_t>(dk) * slot_block;
  if (c.z.rows != n || c.kernel.size() != n * block) throw StructuralError("block backward: missing forward trace");
  if (dy.rows != n || dy.cols != ch) throw StructuralError("block backward: gradient shape mismatch");

  Matrix dx = dy;
  const Matrix dz = linalg::matmul_backward(c.z, dy, store.values(ids_.w_out), store.grads(ids_.w_out));

  const bool relation = spec_.has_relation();
  const bool learned_choice = spec_.kind == BlockKind::coded && relation && spec_.choice == ChoiceMode::learned;
  const bool vanilla = spec_.kind == BlockKind::vanilla;
  const bool needs_logit_grad = vanilla || learned_choice;
  std::vector<double> dlogits(needs_logit_grad ? n * block : 0, 0.0);
  Matrix dq(needs_logit_grad ? n : 0, h_count);

  // Pass A: per-voxel chain from dz back to kernels, choices and logits.
  // Accumulated: kernel/prototypes, relation bias and temperature.
  const std::size_t base = store.slice(first_slice_).offset;
  const std::size_t width = store.slice(last_slice_ - 1).offset + store.slice(last_slice_ - 1).size - base;
  const auto offset_of = [&](ParamStore::Id id) { return store.slice(id).offset - base; };
  const std::size_t kernel_off = spec_.kind == BlockKind::vanilla ? 0 : offset_of(ids_.kernel);
  const std::size_t rel_off = relation ? offset_of(ids_.b_rel) : 0;
  const std::size_t temp_off = spec_.kind == BlockKind::coded ? offset_of(ids_.temperature) : 0;
  const std::size_t k_total = static_cast<std::size_t>(spec_.codebook_size());
  const int m_count = spec_.shapes;
  const int d_count = spec_.dilations;
  const double scale = 1.0 / std::sqrt(static_cast<double>(slot_block));
  const double temperature = c.temperature;

  std::vector<double> local(width, 0.0);
  par::chunked_accumulate(n, local, [&](std::size_t, std::size_t b, std::size_t e, std::span<double> acc) {
    std::vector<double> de(block), dfused(k_total), dw(k_total), dguide(k_total), ds(k_total);
    std::vector<double> dshape(static_cast<std::size_t>(m_count)), ddil(static_cast<std::size_t>(d_count));
    for (std::size_t v = b; v < e; ++v) {
      const double* dzr = dz.data.data() + v * ch;
      for (int j = 0; j < dk; ++j) {
        const auto& slots = level.neighbors[j].slots[v];
        for (int o = 0; o < kSlots; ++o) {
          const std::int32_t nb = slots[o];
          double* dst = de.data() + static_cast<std::size_t>(j) * slot_block + o * h_count;
          if (nb < 0) {
            std::fill(dst, dst + h_count, 0.0);
            continue;
          }
          const double* g = c.values.data.data() + static_cast<std::size_t>(nb) * ch;
          for (std::size_t h = 0; h < h_count; ++h) {
            double s = 0.0;
            for (std::size_t k = h * head_width; k < (h + 1) * head_width; ++k) s += dzr[k] * g[k];
            dst[h] = s;
          }
        }
      }

      if (spec_.kind == BlockKind::conv) {
        for (std::size_t t = 0; t < slot_block; ++t) acc[kernel_off + t] += de[t];
        continue;
      }

      if (vanilla) {
        const auto& slots = level.neighbors[0].slots[v];
        const double* ev = c.kernel.data() + v * block;
        double* df = dlogits.data() + v * block;
        for (std::size_t h = 0; h < h_count; ++h) {
          double dot = 0.0;
          for (int o = 0; o < kSlots; ++o)
            if (slots[o] >= 0) dot += ev[o * h_count + h] * de[o * h_count + h];
          for (int o = 0; o < kSlots; ++o) {
            if (slots[o] < 0) continue;
            const double g = ev[o * h_count + h] * (de[o * h_count + h] - dot);
            df[o * h_count + h] = g;
            acc[rel_off + o * h_count + h] += g;
            dq(v, h) += g;
          }
        }
        continue;
      }

      // Coded: E_j = sum_i w_f[ij] theta~_ij.
      const double* fused = c.fused.data() + v * k_total;
      const double* w = c.w.data() + v * k_total;
      const double* guide = c.guide.data() + v * k_total;
      for (std::size_t k = 0; k < k_total; ++k) {
        const std::size_t j = k % static_cast<std::size_t>(d_count);
        const double* th = c.masked_prototypes.data() + k * slot_block;
        const double* dej = de.data() + j * slot_block;
        double s = 0.0;
        for (std::size_t t = 0; t < slot_block; ++t) {
          s += th[t] * dej[t];
          acc[kernel_off + k * slot_block + t] += fused[k] * dej[t];
        }
        dfused[k] = s;
      }
      if (spec_.renormalize) {
        double dot = 0.0;
        for (std::size_t k = 0; k < k_total; ++k) dot += dfused[k] * fused[k];
        for (std::size_t k = 0; k < k_total; ++k) dfused[k] = (dfused[k] - dot) / c.fused_sum[v];
      }
      if (spec_.use_guidance) {
        const double* shape = c.shape_choice.data() + v * m_count;
        const double* dil = c.dilation_choice.data() + v * d_count;
        const double* xi = c.xi.data() + v * k_total;
        for (std::size_t k = 0; k < k_total; ++k) {
          dw[k] = dfused[k] * guide[k];
          dguide[k] = dfused[k] * w[k];
        }
        std::ranges::fill(dshape, 0.0);
        std::ranges::fill(ddil, 0.0);
        for (int i = 0; i < m_count; ++i)
          for (int j = 0; j < d_count; ++j) {
            const double g = dguide[static_cast<std::size_t>(i * d_count + j)];
            dshape[i] += g * dil[j];
            ddil[j] += g * shape[i];
          }
        double sa = 0.0, sb = 0.0;
        for (int i = 0; i < m_count; ++i) sa += shape[i] * dshape[i];
        for (int j = 0; j < d_count; ++j) sb += dil[j] * ddil[j];
        double dtemp = 0.0;
        for (int i = 0; i < m_count; ++i) {
          double row = 0.0;
          for (int j = 0; j < d_count; ++j) row += xi[i * d_count + j];
          dtemp += shape[i] * (dshape[i] - sa) * (-row / (temperature * temperature));
        }
        for (int j = 0; j < d_count; ++j) {
          double col = 0.0;
          for (int i = 0; i < m_count; ++i) col += xi[i * d_count + j];
          dtemp += dil[j] * (ddil[j] - sb) * (-col / (temperature * temperature));
        }
        acc[temp_off] += dtemp;
      } else {
        std::copy(dfused.begin(), dfused.end(), dw.begin());
      }

      if (!learned_choice) continue;
      double sw = 0.0;
      for (std::size_t k = 0; k < k_total; ++k) sw += w[k] * dw[k];
      for (std::size_t k = 0; k < k_total; ++k) ds[k] = w[k] * (dw[k] - sw) * scale;
      const double* f = c.logits.data() + v * block;
      double* df = dlogits.data() + v * block;
      for (std::size_t k = 0; k < k_total; ++k) {
        const std::size_t j = k % static_cast<std::size_t>(d_count);
        const double* fj = f + j * slot_block;
        const double* th = c.masked_prototypes.data() + k * slot_block;
        double* dfj = df + j * slot_block;
        for (std::size_t t = 0; t < slot_block; ++t) {
          acc[kernel_off + k * slot_block + t] += ds[k] * fj[t];
          dfj[t] += ds[k] * th[t];
        }
      }
      for (int j = 0; j < d_count; ++j) {
        const auto& slots = level.neighbors[j].slots[v];
        double* dfj = df + static_cast<std::size_t>(j) * slot_block;
        for (int o = 0; o < kSlots; ++o) {
          if (slots[o] < 0) {
            std::fill(dfj + o * h_count, dfj + (o + 1) * h_count, 0.0);
            continue;
          }
          for (std::size_t h = 0; h < h_count; ++h) {
            acc[rel_off + o * h_count + h] += dfj[o * h_count + h];
            dq(v, h) += dfj[o * h_count + h];
          }
        }
      }
    }
  });
  if (spec_.kind == BlockKind::coded)
    for (std::size_t k = 0; k < k_total; ++k)
      for (int o = 0; o < kSlots; ++o)
        if (!((spec_.regions[k] >> o) & 1u))
          for (std::size_t h = 0; h < h_count; ++h) local[kernel_off + k * slot_block + o * h_count + h] = 0.0;
  auto grads = store.all_grads();
  for (std::size_t i = 0; i < width; ++i) grads[base + i] += local[i];

  // Pass B: gather gradients onto the neighbors. u = nbr_j(v, o) exactly when
  // v = nbr_j(u, 26 - o), so every row is written by one iteration only.
  Matrix dvalues(n, ch);
  Matrix dp(needs_logit_grad ? n : 0, h_count);
  par::parallel_for(n, [&](std::size_t u) {
    double* dg = dvalues.data.data() + u * ch;
    for (int j = 0; j < dk; ++j) {
      const auto& slots = level.neighbors[j].slots[u];
      for (int o_back = 0; o_back < kSlots; ++o_back) {
        const std::int32_t v = slots[o_back];
        if (v < 0) continue;
        const int o = opposite_slot(o_back);
        const std::size_t at = (static_cast<std::size_t>(v) * dk + j) * slot_block + o * h_count;
        const double* dzr = dz.data.data() + static_cast<std::size_t>(v) * ch;
        for (std::size_t h = 0; h < h_count; ++h) {
          const double a = c.kernel[at + h];
          for (std::size_t k = h * head_width; k < (h + 1) * head_width; ++k) dg[k] += a * dzr[k];
          if (needs_logit_grad) dp(u, h) += dlogits[at + h];
        }
      }
    }
  });

  Matrix du = linalg::matmul_backward(c.u, dvalues, store.values(ids_.w_val), store.grads(ids_.w_val));
  if (relation) {
    if (needs_logit_grad) {
      const Matrix du_p = linalg::matmul_backward(c.u, dp, store.values(ids_.w_nbr), store.grads(ids_.w_nbr));
      const Matrix du_q = linalg::matmul_backward(c.u, dq, store.values(ids_.w_ctr), store.grads(ids_.w_ctr));
      for (std::size_t i = 0; i < du.data.size(); ++i) du.data[i] += du_p.data[i] + du_q.data[i];
    }
  }

  // Pre-norm backward.
  const auto gamma = store.values(ids_.ln_gamma);
  std::vector<double> norm_grads(2 * ch, 0.0);
  par::chunked_accumulate(n, norm_grads, [&](std::size_t, std::size_t b, std::size_t e, std::span<double> acc) {
    for (std::size_t v = b; v < e; ++v)
      for (std::size_t k = 0; k < ch; ++k) {
        acc[k] += du(v, k) * c.x_hat(v, k);
        acc[ch + k] += du(v, k);
      }
  });
  auto dgamma = store.grads(ids_.ln_gamma);
  auto dbeta = store.grads(ids_.ln_beta);
  for (std::size_t k = 0; k < ch; ++k) {
    dgamma[k] += norm_grads[k];
    dbeta[k] += norm_grads[ch + k];
  }
  par::parallel_for(n, [&](std::size_t v) {
    double mean_d = 0.0, mean_dx = 0.0;
    for (std::size_t k = 0; k < ch; ++k) {
      const double d = du(v, k) * gamma[k];
      mean_d += d;
      mean_dx += d * c.x_hat(v, k);
    }
    mean_d /= static_cast<double>(ch);
    mean_dx /= static_cast<double>(ch);
    for (std::size_t k = 0; k < ch; ++k) {
      const double d = du(v, k) * gamma[k];
      dx(v, k) += c.inv_std[v] * (d - mean_d - c.x_hat(v, k) * mean_dx);
    }
  });
  return dx;
}

}  // namespace cvtr
