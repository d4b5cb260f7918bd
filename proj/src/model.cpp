#include "codedvtr/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "codedvtr/error.hpp"
#include "codedvtr/parallel.hpp"
#include "codedvtr/random.hpp"

namespace cvtr {

namespace {

Matrix relu(const Matrix& pre) {
  Matrix out = pre;
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return out;
}

Matrix relu_backward(const Matrix& pre, const Matrix& dy) {
  Matrix d = dy;
  for (std::size_t i = 0; i < d.data.size(); ++i)
    if (!(pre.data[i] > 0.0)) d.data[i] = 0.0;
  return d;
}

Matrix apply(const ParamStore& store, const Linear& l, const Matrix& x) {
  return linalg::matmul(x, store.values(l.w), l.out, store.values(l.b));
}

Matrix apply_backward(ParamStore& store, const Linear& l, const Matrix& x, const Matrix& dy) {
  return linalg::matmul_backward(x, dy, store.values(l.w), store.grads(l.w), store.grads(l.b));
}

}  // namespace

std::vector<int> ModelConfig::strides() const {
  std::vector<int> out;
  for (int s = 0; s < stages(); ++s) out.push_back(1 << s);
  return out;
}

void ModelConfig::validate() const {
  if (channels.empty()) throw ValidationError("model needs at least one stage");
  if (heads < 1) throw ValidationError("heads must be >= 1");
  for (int c : channels)
    if (c < 1 || c % heads != 0)
      throw ValidationError("stage width " + std::to_string(c) + " is not a positive multiple of heads");
  if (blocks_per_stage < 0) throw ValidationError("blocks_per_stage must be >= 0");
  if (shapes < 1 || dilations < 1 || dilations > 8) throw ValidationError("need M >= 1 and 1 <= D <= 8");
  if (!(temperature > 0.0)) throw ValidationError("temperature must be > 0");
  if (classes < 2) throw ValidationError("classes must be >= 2");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"kind", to_string(kind)},
          {"channels", channels},
          {"blocks_per_stage", blocks_per_stage},
          {"heads", heads},
          {"shapes", shapes},
          {"dilations", dilations},
          {"use_guidance", use_guidance},
          {"use_regions", use_regions},
          {"renormalize", renormalize},
          {"choice", to_string(choice)},
          {"temperature", temperature},
          {"choice_seed", choice_seed},
          {"classes", classes}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"kind",        "channels",    "blocks_per_stage", "heads",
                                           "shapes",      "dilations",   "use_guidance",     "use_regions",
                                           "renormalize", "choice",      "temperature",      "choice_seed",
                                           "classes"};
  if (!j.is_object()) throw ValidationError("model config must be an object");
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ValidationError("unknown model field '" + key + "'");
  ModelConfig c;
  try {
    if (j.contains("kind")) c.kind = block_kind_from_string(j["kind"].get<std::string>());
    c.channels = j.value("channels", c.channels);
    c.blocks_per_stage = j.value("blocks_per_stage", c.blocks_per_stage);
    c.heads = j.value("heads", c.heads);
    c.shapes = j.value("shapes", c.shapes);
    c.dilations = j.value("dilations", c.dilations);
    c.use_guidance = j.value("use_guidance", c.use_guidance);
    c.use_regions = j.value("use_regions", c.use_regions);
    c.renormalize = j.value("renormalize", c.renormalize);
    if (j.contains("choice")) c.choice = choice_mode_from_string(j["choice"].get<std::string>());
    c.temperature = j.value("temperature", c.temperature);
    c.choice_seed = j.value("choice_seed", c.choice_seed);
    c.classes = j.value("classes", c.classes);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

PreparedScene prepare_scene(const SparseVoxelGrid& grid, int stages, int max_dilation) {
  if (grid.size() == 0) throw ValidationError("scene has no voxels");
  if (stages < 1) throw ValidationError("stages must be >= 1");
  PreparedScene scene;
  scene.voxel_size = grid.voxel_size;
  scene.levels.push_back(LevelGeometry::build(grid.coords, 1, max_dilation));
  const std::size_t n = grid.size();
  scene.input = Matrix(n, kInputFeatures);
  for (std::size_t v = 0; v < n; ++v) {
    scene.input(v, 0) = 1.0;
    scene.input(v, 1) = (grid.coords[v].k + 0.5) * grid.voxel_size;
  }
  scene.labels = grid.labels.empty() ? std::vector<int>(n, -1) : grid.labels;

  SparseVoxelGrid current;
  current.coords = grid.coords;
  current.features = Matrix(n, 0);
  current.voxel_size = grid.voxel_size;
  for (int s = 1; s < stages; ++s) {
    Downsampled ds = downsample(current, 2);
    PoolMap pool;
    pool.map = std::move(ds.map);
    pool.begin.assign(pool.map.coarse_size + 1, 0);
    for (std::int32_t p : pool.map.parent) ++pool.begin[static_cast<std::size_t>(p) + 1];
    for (std::size_t p = 0; p < pool.map.coarse_size; ++p) pool.begin[p + 1] += pool.begin[p];
    pool.rows.resize(pool.map.parent.size());
    std::vector<std::size_t> fill(pool.begin.begin(), pool.begin.end() - 1);
    for (std::size_t r = 0; r < pool.map.parent.size(); ++r)
      pool.rows[fill[static_cast<std::size_t>(pool.map.parent[r])]++] = static_cast<std::int32_t>(r);
    scene.pool.push_back(std::move(pool));
    scene.levels.push_back(LevelGeometry::build(ds.grid.coords, 1 << s, max_dilation));
    current = std::move(ds.grid);
  }
  return scene;
}

Model::Model(ModelConfig config, const patterns::RegionCodebook* codebook) : config_(std::move(config)) {
  config_.validate();
  const auto strides = config_.strides();
  const bool coded = config_.kind == BlockKind::coded;
  if (coded && config_.use_regions) {
    if (!codebook) throw ValidationError("coded model with regions needs a region codebook");
    if (codebook->shapes != config_.shapes || codebook->dilations != config_.dilations)
      throw ValidationError("region codebook is " + std::to_string(codebook->shapes) + "x" +
                            std::to_string(codebook->dilations) + " but the model expects " +
                            std::to_string(config_.shapes) + "x" + std::to_string(config_.dilations));
    for (int s : strides)
      if (!codebook->has_stride(s)) throw ValidationError("region codebook has no stride " + std::to_string(s));
    codebook_ = *codebook;
  } else if (coded) {
    codebook_ = patterns::full_cube_codebook(config_.shapes, config_.dilations, strides);
  }

  const auto& ch = config_.channels;
  const int stages = config_.stages();
  auto make_block = [&](int stage, const std::string& name) {
    BlockSpec spec;
    spec.kind = config_.kind;
    spec.channels = ch[stage];
    spec.heads = config_.heads;
    spec.shapes = config_.shapes;
    spec.dilations = config_.dilations;
    spec.use_guidance = config_.use_guidance;
    spec.renormalize = config_.renormalize;
    spec.choice = config_.choice;
    spec.choice_seed = rnd::combine(config_.choice_seed, blocks_.size());
    spec.temperature = config_.temperature;
    if (coded) spec.regions = codebook_.flat(strides[stage]);
    blocks_.emplace_back(spec, store_, name);
    block_stage_.push_back(stage);
    return blocks_.size() - 1;
  };

  stem_ = add_linear("stem", kInputFeatures, static_cast<std::size_t>(ch[0]));
  enc_blocks_.resize(stages);
  dec_blocks_.resize(stages);
  up_.resize(static_cast<std::size_t>(stages - 1));
  for (int s = 0; s < stages; ++s) {
    if (s > 0)
      down_.push_back(add_linear("down" + std::to_string(s), static_cast<std::size_t>(ch[s - 1]),
                                 static_cast<std::size_t>(ch[s])));
    for (int b = 0; b < config_.blocks_per_stage; ++b)
      enc_blocks_[s].push_back(make_block(s, "enc" + std::to_string(s) + ".block" + std::to_string(b)));
  }
  for (int s = stages - 2; s >= 0; --s) {
    up_[s] = add_linear("up" + std::to_string(s), static_cast<std::size_t>(ch[s + 1] + ch[s]),
                        static_cast<std::size_t>(ch[s]));
    for (int b = 0; b < config_.blocks_per_stage; ++b)
      dec_blocks_[s].push_back(make_block(s, "dec" + std::to_string(s) + ".block" + std::to_string(b)));
  }
  head_hidden_ = add_linear("head.hidden", static_cast<std::size_t>(ch[0]), static_cast<std::size_t>(ch[0]));
  head_out_ = add_linear("head.out", static_cast<std::size_t>(ch[0]), static_cast<std::size_t>(config_.classes));
  store_.freeze();
}

Linear Model::add_linear(const std::string& name, std::size_t in, std::size_t out) {
  Linear l;
  l.in = in;
  l.out = out;
  l.w = store_.add(name + ".w", {in, out});
  l.b = store_.add(name + ".b", {out});
  linears_.push_back(l);
  return l;
}

void Model::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (const Linear& l : linears_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
    for (double& x : store_.values(l.w)) x = rnd::uniform(rng, -bound, bound);
    std::ranges::fill(store_.values(l.b), 0.0);
  }
  for (const auto& block : blocks_) block.initialize(store_, rng);
}

void Model::set_temperature(double temperature) {
  for (const auto& block : blocks_) block.set_temperature(store_, temperature);
}

Matrix Model::forward(const PreparedScene& scene, ModelTrace* trace) const {
  const int stages = config_.stages();
  if (static_cast<int>(scene.levels.size()) < stages) throw StructuralError("scene prepared with too few levels");
  if (scene.input.cols != static_cast<std::size_t>(kInputFeatures))
    throw StructuralError("scene input has the wrong feature count");
  ModelTrace local;
  ModelTrace& t = trace ? *trace : local;
  t.block_in.assign(blocks_.size(), Matrix());
  t.block_cache.assign(blocks_.size(), BlockCache());
  t.skip.assign(stages, Matrix());
  t.pool_arg.assign(stages, {});
  t.pooled.assign(stages, Matrix());
  t.down_pre.assign(stages, Matrix());
  t.concat.assign(stages, Matrix());
  t.up_pre.assign(stages, Matrix());

  t.stem_pre = apply(store_, stem_, scene.input);
  Matrix h = relu(t.stem_pre);
  for (int s = 0; s < stages; ++s) {
    if (s > 0) {
      const PoolMap& pool = scene.pool[s - 1];
      const std::size_t width = h.cols;
      Matrix pooled(pool.map.coarse_size, width);
      std::vector<std::int32_t> arg(pool.map.coarse_size * width);
      par::parallel_for(pool.map.coarse_size, [&](std::size_t p) {
        for (std::size_t c = 0; c < width; ++c) {
          double best = -std::numeric_limits<double>::infinity();
          std::int32_t who = -1;
          for (std::size_t r = pool.begin[p]; r < pool.begin[p + 1]; ++r) {
            const double v = h(static_cast<std::size_t>(pool.rows[r]), c);
            if (who < 0 || v > best) {
              best = v;
              who = pool.rows[r];
            }
          }
          pooled(p, c) = best;
          arg[p * width + c] = who;
        }
      });
      t.pool_arg[s] = std::move(arg);
      t.down_pre[s] = apply(store_, down_[s - 1], pooled);
      t.pooled[s] = std::move(pooled);
      h = relu(t.down_pre[s]);
    }
    for (std::size_t b : enc_blocks_[s]) {
      t.block_in[b] = h;
      h = blocks_[b].forward(store_, scene.levels[s], h, &t.block_cache[b]);
    }
    t.skip[s] = h;
  }
  for (int s = stages - 2; s >= 0; --s) {
    const Matrix up = upsample(h, scene.pool[s].map);
    const Matrix& skip = t.skip[s];
    Matrix cat(up.rows, up.cols + skip.cols);
    for (std::size_t v = 0; v < up.rows; ++v) {
      std::copy(up.row(v).begin(), up.row(v).end(), cat.row(v).begin());
      std::copy(skip.row(v).begin(), skip.row(v).end(), cat.row(v).begin() + static_cast<std::ptrdiff_t>(up.cols));
    }
    t.up_pre[s] = apply(store_, up_[s], cat);
    t.concat[s] = std::move(cat);
    h = relu(t.up_pre[s]);
    for (std::size_t b : dec_blocks_[s]) {
      t.block_in[b] = h;
      h = blocks_[b].forward(store_, scene.levels[s], h, &t.block_cache[b]);
    }
  }
  t.head_in = h;
  t.head_pre = apply(store_, head_hidden_, h);
  t.head_hidden = relu(t.head_pre);
  t.logits = apply(store_, head_out_, t.head_hidden);
  return t.logits;
}

void Model::backward(const PreparedScene& scene, const ModelTrace& t, const Matrix& dlogits) {
  const int stages = config_.stages();
  if (t.logits.rows != dlogits.rows || t.logits.cols != dlogits.cols)
    throw StructuralError("model backward: gradient does not match the forward trace");
  Matrix dh = apply_backward(store_, head_out_, t.head_hidden, dlogits);
  dh = apply_backward(store_, head_hidden_, t.head_in, relu_backward(t.head_pre, dh));

  std::vector<Matrix> dskip(stages);
  for (int s = 0; s <= stages - 2; ++s) {
    for (auto it = dec_blocks_[s].rbegin(); it != dec_blocks_[s].rend(); ++it)
      dh = blocks_[*it].backward(store_, scene.levels[s], t.block_cache[*it], dh);
    const Matrix dcat = apply_backward(store_, up_[s], t.concat[s], relu_backward(t.up_pre[s], dh));
    const std::size_t up_cols = dcat.cols - t.skip[s].cols;
    dskip[s] = Matrix(dcat.rows, t.skip[s].cols);
    for (std::size_t v = 0; v < dcat.rows; ++v)
      for (std::size_t c = 0; c < dskip[s].cols; ++c) dskip[s](v, c) = dcat(v, up_cols + c);
    const PoolMap& pool = scene.pool[s];
    Matrix dcoarse(pool.map.coarse_size, up_cols);
    par::parallel_for(pool.map.coarse_size, [&](std::size_t p) {
      for (std::size_t r = pool.begin[p]; r < pool.begin[p + 1]; ++r)
        for (std::size_t c = 0; c < up_cols; ++c) dcoarse(p, c) += dcat(static_cast<std::size_t>(pool.rows[r]), c);
    });
    dh = std::move(dcoarse);
  }

  for (int s = stages - 1; s >= 0; --s) {
    if (s <= stages - 2)
      for (std::size_t i = 0; i < dh.data.size(); ++i) dh.data[i] += dskip[s].data[i];
    for (auto it = enc_blocks_[s].rbegin(); it != enc_blocks_[s].rend(); ++it)
      dh = blocks_[*it].backward(store_, scene.levels[s], t.block_cache[*it], dh);
    if (s > 0) {
      const Matrix dpooled =
          apply_backward(store_, down_[s - 1], t.pooled[s], relu_backward(t.down_pre[s], dh));
      const std::size_t width = dpooled.cols;
      Matrix dfine(scene.levels[s - 1].size(), width);
      const auto& arg = t.pool_arg[s];
      // Each fine row has one parent, so the writes are disjoint.
      par::parallel_for(dpooled.rows, [&](std::size_t p) {
        for (std::size_t c = 0; c < width; ++c) dfine(static_cast<std::size_t>(arg[p * width + c]), c) += dpooled(p, c);
      });
      dh = std::move(dfine);
    } else {
      apply_backward(store_, stem_, scene.input, relu_backward(t.stem_pre, dh));
    }
  }
}

LossResult cross_entropy(const Matrix& logits, const std::vector<int>& labels, Matrix* dlogits, double normalizer) {
  if (labels.size() != logits.rows) throw StructuralError("cross_entropy: label count mismatch");
  const std::size_t n = logits.rows;
  const std::size_t k = logits.cols;
  std::vector<double> losses(n, 0.0);
  std::vector<char> hit(n, 0);
  LossResult r;
  for (int l : labels) {
    if (l >= static_cast<int>(k)) throw ValidationError("label " + std::to_string(l) + " outside the class range");
    if (l >= 0) ++r.labeled;
  }
  const double norm = normalizer > 0.0 ? normalizer : static_cast<double>(std::max<std::size_t>(r.labeled, 1));
  if (dlogits) *dlogits = Matrix(n, k);
  par::parallel_for(n, [&](std::size_t v) {
    if (labels[v] < 0) return;
    const auto row = logits.row(v);
    const double peak = *std::max_element(row.begin(), row.end());
    double total = 0.0;
    for (double a : row) total += std::exp(a - peak);
    const auto label = static_cast<std::size_t>(labels[v]);
    losses[v] = -(row[label] - peak - std::log(total));
    hit[v] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == label;
    if (dlogits)
      for (std::size_t c = 0; c < k; ++c)
        (*dlogits)(v, c) = (std::exp(row[c] - peak) / total - (c == label ? 1.0 : 0.0)) / norm;
  });
  for (std::size_t v = 0; v < n; ++v) {
    r.loss_sum += losses[v];
    r.correct += static_cast<std::size_t>(hit[v]);
  }
  return r;
}

std::vector<int> predict(const Matrix& logits) {
  std::vector<int> out(logits.rows);
  for (std::size_t v = 0; v < logits.rows; ++v) {
    const auto row = logits.row(v);
    out[v] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

}  // namespace cvtr
