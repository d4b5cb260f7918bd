#include "codedvtr/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "codedvtr/error.hpp"
#include "codedvtr/geo_patterns.hpp"
#include "codedvtr/numerics.hpp"

namespace cvtr::diag {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

int argmax_lowest(std::span<const double> v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

int modal(const std::vector<std::int64_t>& hist) {
  if (hist.empty()) return -1;
  std::int64_t total = 0;
  for (auto h : hist) total += h;
  if (total == 0) return -1;
  int best = 0;
  for (std::size_t i = 1; i < hist.size(); ++i)
    if (hist[i] > hist[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

double normalized_entropy(std::span<const double> p) {
  if (p.size() <= 1) return 0.0;
  double h = 0.0;
  for (double x : p)
    if (x > 0.0) h -= x * std::log(x);
  return h / std::log(static_cast<double>(p.size()));
}

void check_layer(const Model& model, std::size_t layer) {
  if (layer >= model.blocks().size()) throw ValidationError("layer " + std::to_string(layer) + " does not exist");
  if (model.config().kind != BlockKind::coded) throw ValidationError("choice maps need a coded model");
}

}  // namespace

std::vector<LayerEntropy> layer_entropy_profile(const Model& model, const std::vector<PreparedScene>& scenes) {
  const auto& blocks = model.blocks();
  std::vector<LayerEntropy> rows(blocks.size());
  std::vector<double> sum_w(blocks.size(), 0.0), sum_wf(blocks.size(), 0.0), sum_fp(blocks.size(), 0.0);
  std::vector<std::size_t> voxels(blocks.size(), 0), fp_terms(blocks.size(), 0);
  const auto heads = static_cast<std::size_t>(model.config().heads);

  for (const auto& scene : scenes) {
    ModelTrace trace;
    model.forward(scene, &trace);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const BlockSpec& spec = blocks[b].spec();
      const BlockCache& cache = trace.block_cache[b];
      const LevelGeometry& level = scene.levels[model.block_stage()[b]];
      const std::size_t n = level.size();
      const auto k = static_cast<std::size_t>(spec.codebook_size());
      const int dk = spec.kernel_dilations();
      std::vector<double> wf(k);
      std::vector<double> slot_mass;
      for (std::size_t v = 0; v < n; ++v) {
        if (spec.kind == BlockKind::coded) {
          sum_w[b] += normalized_entropy(std::span<const double>(cache.w.data() + v * k, k));
          double total = 0.0;
          for (std::size_t i = 0; i < k; ++i) total += (wf[i] = cache.fused[v * k + i]);
          for (double& x : wf) x = total > 0.0 ? x / total : 1.0 / static_cast<double>(k);
          sum_wf[b] += normalized_entropy(wf);
        }
        for (std::size_t h = 0; h < heads; ++h) {
          slot_mass.clear();
          double total = 0.0;
          for (int j = 0; j < dk; ++j)
            for (int o = 0; o < kSlots; ++o) {
              if (level.neighbors[j].slots[v][o] < 0) continue;
              const double a = std::abs(cache.kernel[((v * dk + j) * kSlots + o) * heads + h]);
              slot_mass.push_back(a);
              total += a;
            }
          if (slot_mass.size() <= 1 || !(total > 0.0)) {
            ++fp_terms[b];
            continue;
          }
          for (double& x : slot_mass) x /= total;
          sum_fp[b] += normalized_entropy(slot_mass);
          ++fp_terms[b];
        }
      }
      voxels[b] += n;
    }
  }
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    rows[b].layer = static_cast<int>(b);
    rows[b].stage = model.block_stage()[b];
    if (voxels[b]) {
      rows[b].entropy = sum_w[b] / static_cast<double>(voxels[b]);
      rows[b].entropy_wf = sum_wf[b] / static_cast<double>(voxels[b]);
    }
    if (fp_terms[b]) rows[b].entropy_fp = sum_fp[b] / static_cast<double>(fp_terms[b]);
  }
  return rows;
}

std::string entropy_csv(const std::vector<LayerEntropy>& rows) {
  std::string out = "layer,entropy,entropy_wf,entropy_fp\n";
  for (const auto& r : rows)
    out += std::to_string(r.layer) + "," + fmt(r.entropy) + "," + fmt(r.entropy_wf) + "," + fmt(r.entropy_fp) + "\n";
  return out;
}

double deep_entropy(const std::vector<LayerEntropy>& rows, int first_layer) {
  double sum = 0.0;
  int count = 0;
  for (const auto& r : rows)
    if (r.layer >= first_layer) {
      sum += r.entropy_wf;
      ++count;
    }
  if (count == 0) throw ValidationError("model has no layers at or beyond " + std::to_string(first_layer));
  return sum / count;
}

std::vector<int> choice_map(std::span<const double> fused, int shapes, int dilations, ChoiceAxis axis) {
  const auto k = static_cast<std::size_t>(shapes * dilations);
  if (k == 0 || fused.size() % k != 0) throw StructuralError("choice_map: size is not a multiple of M * D");
  const std::size_t n = fused.size() / k;
  std::vector<int> out(n);
  std::vector<double> marginal(static_cast<std::size_t>(axis == ChoiceAxis::shape ? shapes : dilations));
  for (std::size_t v = 0; v < n; ++v) {
    std::ranges::fill(marginal, 0.0);
    for (int i = 0; i < shapes; ++i)
      for (int j = 0; j < dilations; ++j)
        marginal[static_cast<std::size_t>(axis == ChoiceAxis::shape ? i : j)] +=
            fused[v * k + static_cast<std::size_t>(i * dilations + j)];
    out[v] = argmax_lowest(marginal);
  }
  return out;
}

std::size_t default_choice_layer(const Model& model) {
  const auto& stages = model.block_stage();
  for (std::size_t b = stages.size(); b-- > 0;)
    if (stages[b] == 0) return b;
  throw ValidationError("model has no block at stride 1");
}

ChoiceExport choice_export(const Model& model, const PreparedScene& scene, std::size_t layer) {
  check_layer(model, layer);
  ModelTrace trace;
  model.forward(scene, &trace);
  const auto& cfg = model.config();
  const LevelGeometry& level = scene.levels[model.block_stage()[layer]];
  ChoiceExport e;
  const double cell = level.stride * scene.voxel_size;
  for (const auto& c : level.coords) e.positions.push_back({(c.i + 0.5) * cell, (c.j + 0.5) * cell, (c.k + 0.5) * cell});
  e.shape = choice_map(trace.block_cache[layer].fused, cfg.shapes, cfg.dilations, ChoiceAxis::shape);
  e.dilation = choice_map(trace.block_cache[layer].fused, cfg.shapes, cfg.dilations, ChoiceAxis::dilation);
  return e;
}

std::string choice_csv(const ChoiceExport& e, ChoiceAxis axis) {
  const auto& values = axis == ChoiceAxis::shape ? e.shape : e.dilation;
  std::string out = "x,y,z,choice\n";
  for (std::size_t v = 0; v < e.positions.size(); ++v)
    out += fmt(e.positions[v][0]) + "," + fmt(e.positions[v][1]) + "," + fmt(e.positions[v][2]) + "," +
           std::to_string(values[v]) + "\n";
  return out;
}

bool plane_shaped(OccupancyMask region) {
  const OccupancyMask plane = patterns::horizontal_plane_mask();
  return (region & ~plane) == 0 && popcount(region) >= 5;
}

nlohmann::json AdaptationStats::to_json() const {
  return {{"floor_shape_hist", floor_shape_hist},
          {"floor_modal_shape", floor_modal_shape},
          {"floor_modal_is_plane", floor_modal_is_plane},
          {"plane_shapes", plane_shapes},
          {"density_median", density_median},
          {"low_density_dilation_hist", low_dilation_hist},
          {"high_density_dilation_hist", high_dilation_hist},
          {"low_density_modal_dilation", low_modal_dilation + 1},
          {"high_density_modal_dilation", high_modal_dilation + 1}};
}

AdaptationStats geometric_adaptation(const Model& model, const std::vector<PreparedScene>& scenes, std::size_t layer) {
  check_layer(model, layer);
  if (model.block_stage()[layer] != 0) throw ValidationError("geometric adaptation is measured at stride 1");
  const auto& cfg = model.config();
  const OccupancyMask plane = patterns::horizontal_plane_mask();
  AdaptationStats s;
  const auto regions = model.blocks()[layer].spec().regions;
  for (int i = 0; i < cfg.shapes; ++i) s.plane_shapes.push_back(plane_shaped(regions[static_cast<std::size_t>(i * cfg.dilations)]));

  std::vector<int> density;
  for (const auto& scene : scenes)
    for (OccupancyMask m : scene.levels[0].occupancy[0]) density.push_back(popcount(m));
  if (density.empty()) throw ValidationError("no voxels to measure");
  std::vector<int> sorted = density;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t mid = sorted.size() / 2;
  s.density_median = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);

  s.floor_shape_hist.assign(static_cast<std::size_t>(cfg.shapes), 0);
  s.low_dilation_hist.assign(static_cast<std::size_t>(cfg.dilations), 0);
  s.high_dilation_hist.assign(static_cast<std::size_t>(cfg.dilations), 0);
  std::size_t at = 0;
  for (const auto& scene : scenes) {
    ModelTrace trace;
    model.forward(scene, &trace);
    const auto& fused = trace.block_cache[layer].fused;
    const auto shape = choice_map(fused, cfg.shapes, cfg.dilations, ChoiceAxis::shape);
    const auto dil = choice_map(fused, cfg.shapes, cfg.dilations, ChoiceAxis::dilation);
    const auto& occ = scene.levels[0].occupancy[0];
    for (std::size_t v = 0; v < scene.size(); ++v, ++at) {
      if (scene.labels[v] == 0 && occ[v] == plane) ++s.floor_shape_hist[static_cast<std::size_t>(shape[v])];
      auto& hist = density[at] < s.density_median ? s.low_dilation_hist : s.high_dilation_hist;
      ++hist[static_cast<std::size_t>(dil[v])];
    }
  }
  s.floor_modal_shape = modal(s.floor_shape_hist);
  s.floor_modal_is_plane = s.floor_modal_shape >= 0 && s.plane_shapes[static_cast<std::size_t>(s.floor_modal_shape)];
  s.low_modal_dilation = modal(s.low_dilation_hist);
  s.high_modal_dilation = modal(s.high_dilation_hist);
  return s;
}

std::string gap_csv(const std::vector<GapRow>& rows) {
  std::string out = "config,corpus_size,epoch,train_acc,val_acc,gap\n";
  for (const auto& r : rows)
    out += r.config + "," + std::to_string(r.corpus_size) + "," + std::to_string(r.epoch) + "," + fmt(r.train_acc) +
           "," + fmt(r.val_acc) + "," + fmt(r.gap) + "\n";
  return out;
}

std::vector<GapRow> gap_rows(const std::string& name, std::size_t corpus_size, const TrainReport& report) {
  std::vector<GapRow> rows;
  for (const auto& e : report.epochs) {
    GapRow r;
    r.config = name;
    r.corpus_size = corpus_size;
    r.epoch = e.epoch;
    r.train_acc = e.train_acc;
    r.val_acc = e.has_val ? e.val.accuracy : std::nan("");
    r.gap = r.train_acc - r.val_acc;
    rows.push_back(r);
  }
  return rows;
}

std::size_t trainable_parameters(const ModelConfig& config) {
  ModelConfig c = config;
  c.use_regions = false;
  return Model(c, nullptr).store().trainable_size();
}

void require_matched_parameters(const ModelConfig& a, const ModelConfig& b, double tolerance) {
  const double pa = static_cast<double>(trainable_parameters(a));
  const double pb = static_cast<double>(trainable_parameters(b));
  const double rel = std::abs(pa - pb) / std::max(pa, pb);
  if (rel > tolerance)
    throw ValidationError("parameter counts differ by " + fmt(100.0 * rel) + "% (" + fmt(pa) + " vs " + fmt(pb) + ")");
}

ModelConfig match_parameters(const ModelConfig& reference, BlockKind kind) {
  const double target = static_cast<double>(trainable_parameters(reference));
  ModelConfig c = reference;
  c.kind = kind;
  auto distance = [&](const ModelConfig& m) { return std::abs(static_cast<double>(trainable_parameters(m)) - target); };
  double best = distance(c);
  for (int round = 0; round < 10; ++round) {
    bool changed = false;
    for (std::size_t s = 0; s < c.channels.size(); ++s) {
      const int limit = 4 * std::max(reference.channels[s], c.heads);
      for (int w = c.heads; w <= limit; w += c.heads) {
        ModelConfig t = c;
        t.channels[s] = w;
        const double d = distance(t);
        if (d < best) {
          best = d;
          c = t;
          changed = true;
        }
      }
    }
    if (!changed) break;
  }
  return c;
}

RunConfig random_codebook_config(const RunConfig& learned) {
  if (learned.model.kind != BlockKind::coded) throw ValidationError("the random-codebook baseline needs a coded model");
  RunConfig rs = learned;
  rs.model.choice = ChoiceMode::frozen_random;
  rs.model.choice_seed = learned.seed;
  return rs;
}

}  // namespace cvtr::diag
