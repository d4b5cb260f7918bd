#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "codedvtr/checkpoint.hpp"
#include "codedvtr/error.hpp"
#include "codedvtr/finite_diff.hpp"
#include "codedvtr/model.hpp"
#include "codedvtr/train.hpp"
#include "support.hpp"

using namespace cvtr;
using Catch::Approx;

namespace {

SparseVoxelGrid random_grid(std::size_t n, int box, std::uint64_t seed, int classes = 5) {
  std::mt19937_64 rng(seed);
  SparseVoxelGrid g;
  g.coords = testing::random_coords(n, box, rng);
  std::sort(g.coords.begin(), g.coords.end());
  g.features = Matrix(n, 0);
  for (std::size_t v = 0; v < n; ++v) g.labels.push_back(static_cast<int>(rng() % static_cast<unsigned>(classes)));
  g.voxel_size = 0.2;
  return g;
}

ModelConfig tiny(BlockKind kind) {
  ModelConfig c;
  c.kind = kind;
  c.channels = {4, 6};
  c.blocks_per_stage = 1;
  c.heads = 2;
  c.shapes = 2;
  c.dilations = 2;
  c.use_regions = false;
  return c;
}

patterns::RegionCodebook random_codebook(const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  patterns::RegionCodebook cb;
  cb.shapes = c.shapes;
  cb.dilations = c.dilations;
  for (int s : c.strides())
    for (int d = 1; d <= c.dilations; ++d) {
      const auto masks = random_regions(static_cast<std::size_t>(c.shapes), rng);
      cb.regions[s][d].assign(masks.begin(), masks.end());
    }
  return cb;
}

double model_loss(Model& model, const PreparedScene& scene, bool with_grad) {
  ModelTrace trace;
  const Matrix logits = model.forward(scene, &trace);
  Matrix dlogits;
  const auto r = cross_entropy(logits, scene.labels, with_grad ? &dlogits : nullptr);
  if (with_grad) {
    model.store().zero_grads();
    model.backward(scene, trace, dlogits);
  }
  return r.loss_sum / static_cast<double>(r.labeled);
}

// Counted by hand from the layer list: stem, down/up linears, blocks, head.
std::size_t closed_form_parameters(const ModelConfig& c) {
  const std::size_t h = static_cast<std::size_t>(c.heads), k = static_cast<std::size_t>(c.shapes * c.dilations);
  const std::size_t q = static_cast<std::size_t>(c.classes), stages = c.channels.size();
  std::vector<std::size_t> w(c.channels.begin(), c.channels.end());
  auto block = [&](std::size_t ch) {
    std::size_t p = 2 * ch + 2 * ch * ch;
    const bool relation = c.kind == BlockKind::vanilla || (c.kind == BlockKind::coded && k > 1);
    if (relation) p += 2 * ch * h + 27 * h;
    if (c.kind == BlockKind::conv) p += 27 * h;
    if (c.kind == BlockKind::coded) p += k * 27 * h;
    return p;
  };
  std::size_t total = 2 * w[0] + w[0];
  for (std::size_t s = 1; s < stages; ++s) total += w[s - 1] * w[s] + w[s];
  for (std::size_t s = 0; s + 1 < stages; ++s) total += (w[s + 1] + w[s]) * w[s] + w[s];
  total += w[0] * w[0] + w[0] + w[0] * q + q;
  const auto b = static_cast<std::size_t>(c.blocks_per_stage);
  for (std::size_t s = 0; s < stages; ++s) total += b * block(w[s]) * (s + 1 < stages ? 2 : 1);
  return total;
}

}  // namespace

TEST_CASE("model gradients match finite differences", "[model]") {
  for (BlockKind kind : {BlockKind::conv, BlockKind::vanilla, BlockKind::coded}) {
    CAPTURE(to_string(kind));
    ModelConfig c = tiny(kind);
    std::optional<patterns::RegionCodebook> cb;
    if (kind == BlockKind::coded) {
      c.use_regions = true;
      cb = random_codebook(c, 11);
    }
    Model model(c, cb ? &*cb : nullptr);
    model.initialize(3);
    // Zero initial biases can switch off whole stem rows, and equal rows tie
    // in the max pool where the loss has a kink. Jitter every weight.
    std::mt19937_64 jitter(17);
    for (const auto& slice : model.store().slices())
      if (slice.trainable)
        for (std::size_t i = slice.offset; i < slice.offset + slice.size; ++i)
          model.store().all_values()[i] += 0.3 * rnd::normal(jitter);
    const PreparedScene scene = prepare_scene(random_grid(40, 5, 8), c.stages(), c.dilations);
    model_loss(model, scene, true);
    auto values = model.store().all_values();
    const std::vector<double> analytic(model.store().all_grads().begin(), model.store().all_grads().end());
    // Central differences on sampled coordinates. Loss values near 1 leave
    // about 1e-11 of rounding noise at this step, hence the absolute floor.
    std::mt19937_64 rng(5);
    const double h = 1e-5;
    double worst = 0.0;
    for (int t = 0; t < 600; ++t) {
      const std::size_t i = rng() % values.size();
      const double x = values[i];
      values[i] = x + h;
      const double up = model_loss(model, scene, false);
      values[i] = x - h;
      const double down = model_loss(model, scene, false);
      values[i] = x;
      const double numeric = (up - down) / (2 * h);
      const double err = std::abs(numeric - analytic[i]) / (std::max(std::abs(numeric), std::abs(analytic[i])) + 1e-6);
      worst = std::max(worst, err);
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("trainable parameter count follows the closed form", "[model]") {
  ModelConfig c;
  c.use_regions = false;
  CHECK(Model(c, nullptr).store().size() > 0);
  for (BlockKind kind : {BlockKind::conv, BlockKind::vanilla, BlockKind::coded})
    for (int m : {1, 3})
      for (int d : {1, 2})
        for (int stages : {1, 2, 3}) {
          ModelConfig t = c;
          t.kind = kind;
          t.use_regions = false;
          t.shapes = m;
          t.dilations = d;
          t.channels.assign(static_cast<std::size_t>(stages), 0);
          for (int s = 0; s < stages; ++s) t.channels[s] = 8 * (s + 1);
          t.blocks_per_stage = 2;
          CAPTURE(to_string(kind), m, d, stages);
          CHECK(Model(t, nullptr).store().trainable_size() == closed_form_parameters(t));
        }
  ModelConfig standard;
  standard.channels = {40, 80};
  standard.blocks_per_stage = 2;
  standard.use_regions = false;
  CHECK(closed_form_parameters(standard) == 58505);
}

TEST_CASE("conv and single-element coded models have equal trainable counts", "[model]") {
  ModelConfig conv = tiny(BlockKind::conv);
  ModelConfig coded = tiny(BlockKind::coded);
  coded.shapes = coded.dilations = 1;
  conv.shapes = conv.dilations = 1;
  CHECK(Model(conv, nullptr).store().trainable_size() == Model(coded, nullptr).store().trainable_size());
}

TEST_CASE("coded model checks its codebook", "[model]") {
  ModelConfig c = tiny(BlockKind::coded);
  c.use_regions = true;
  CHECK_THROWS_AS(Model(c, nullptr), ValidationError);
  auto cb = random_codebook(c, 1);
  cb.regions.erase(2);
  CHECK_THROWS_AS(Model(c, &cb), ValidationError);
  c.channels = {5};
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("zero learning rate leaves the loss unchanged", "[model]") {
  const ModelConfig c = tiny(BlockKind::coded);
  Model model(c, nullptr);
  model.initialize(2);
  const std::vector<PreparedScene> scenes{prepare_scene(random_grid(60, 6, 1), 2, 2),
                                          prepare_scene(random_grid(50, 6, 2), 2, 2)};
  const std::vector<double> before(model.store().all_values().begin(), model.store().all_values().end());
  TrainConfig tc;
  tc.epochs = 3;
  tc.shuffle = false;
  AdamConfig adam;
  adam.lr = 0.0;
  const auto report = train_model(model, scenes, {}, tc, adam, 0);
  REQUIRE(report.epochs.size() == 3);
  for (const auto& e : report.epochs) CHECK(e.train_loss == report.epochs[0].train_loss);
  CHECK(std::equal(before.begin(), before.end(), model.store().all_values().begin()));
}

TEST_CASE("training lowers the loss on a fixed scene", "[model]") {
  const ModelConfig c = tiny(BlockKind::coded);
  Model model(c, nullptr);
  model.initialize(4);
  const std::vector<PreparedScene> scenes{prepare_scene(random_grid(80, 6, 9, 2), 2, 2)};
  TrainConfig tc;
  tc.epochs = 40;
  tc.batch_size = 1;
  const auto report = train_model(model, scenes, {}, tc, AdamConfig{}, 0);
  CHECK(report.epochs.back().train_loss < report.epochs.front().train_loss);
}

TEST_CASE("same seed gives identical checkpoint bytes", "[model]") {
  const ModelConfig c = tiny(BlockKind::coded);
  const std::vector<PreparedScene> scenes{prepare_scene(random_grid(60, 6, 1), 2, 2),
                                          prepare_scene(random_grid(50, 6, 2), 2, 2)};
  auto run = [&](std::uint64_t seed) {
    Model model(c, nullptr);
    model.initialize(seed);
    TrainConfig tc;
    tc.epochs = 2;
    train_model(model, scenes, {}, tc, AdamConfig{}, seed);
    return checkpoint_bytes(model, AdamConfig{}, seed);
  };
  const auto a = run(7);
  CHECK(a == run(7));
  CHECK(a != run(8));
}

TEST_CASE("checkpoints round-trip and reject a corrupted codebook", "[model]") {
  ModelConfig c = tiny(BlockKind::coded);
  c.use_regions = true;
  const auto cb = random_codebook(c, 5);
  Model model(c, &cb);
  model.initialize(6);
  const auto dir = std::filesystem::temp_directory_path() / "codedvtr_ckpt_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "model.bin").string();
  save_checkpoint(path, model, AdamConfig{}, 6, {{"note", "x"}});

  const auto loaded = load_checkpoint(path);
  CHECK(loaded.seed == 6);
  CHECK(loaded.header.at("extra").at("note") == "x");
  CHECK(loaded.model.codebook().dump() == cb.dump());
  const auto a = model.store().all_values();
  const auto b = loaded.model.store().all_values();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == static_cast<double>(static_cast<float>(a[i])));

  std::string bytes = checkpoint_bytes(model, AdamConfig{}, 6);
  const auto at = bytes.find("\"codebook_hash\":\"");
  REQUIRE(at != std::string::npos);
  char& digit = bytes[at + 17];
  digit = digit == '0' ? '1' : '0';
  const std::string bad = (dir / "bad.bin").string();
  std::ofstream(bad, std::ios::binary) << bytes;
  CHECK_THROWS_AS(load_checkpoint(bad), IoError);

  std::ofstream(bad, std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  CHECK_THROWS_AS(load_checkpoint(bad), IoError);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.bin").string()), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("per-class IoU matches set intersections", "[model]") {
  std::mt19937_64 rng(12);
  const int k = 4;
  std::vector<int> truth(500), pred(500);
  for (std::size_t v = 0; v < truth.size(); ++v) {
    truth[v] = v % 17 == 0 ? -1 : static_cast<int>(rng() % 3);  // class 3 never in the ground truth
    pred[v] = static_cast<int>(rng() % k);
  }
  const auto r = score(truth, pred, k);
  double mean = 0.0;
  for (int c = 0; c < k; ++c) {
    std::set<std::size_t> t, p;
    for (std::size_t v = 0; v < truth.size(); ++v) {
      if (truth[v] < 0) continue;
      if (truth[v] == c) t.insert(v);
      if (pred[v] == c) p.insert(v);
    }
    std::size_t inter = 0;
    for (std::size_t v : t) inter += p.contains(v);
    const std::size_t uni = t.size() + p.size() - inter;
    CHECK(r.iou[c] == Approx(static_cast<double>(inter) / static_cast<double>(uni)));
    if (!t.empty()) mean += r.iou[c] / 3.0;
  }
  CHECK_FALSE(r.present[3]);
  CHECK(r.mean_iou == Approx(mean));

  std::vector<int> clean;
  for (int t : truth)
    if (t >= 0) clean.push_back(t);
  const auto perfect = score(clean, clean, k);
  CHECK(perfect.mean_iou == 1.0);
  CHECK(perfect.accuracy == 1.0);
  std::vector<int> wrong(clean.size());
  for (std::size_t v = 0; v < clean.size(); ++v) wrong[v] = (clean[v] + 1) % 3;
  const auto none = score(clean, wrong, k);
  CHECK(none.mean_iou == 0.0);
  CHECK(none.accuracy == 0.0);
  CHECK_THROWS_AS(score({-1, -1}, {0, 0}, k), ValidationError);
}

TEST_CASE("cross-entropy values and gradients", "[model]") {
  Matrix logits(3, 4);
  const auto flat = cross_entropy(logits, {0, 2, -1}, nullptr);
  CHECK(flat.labeled == 2);
  CHECK(flat.loss_sum == Approx(2.0 * std::log(4.0)));

  std::mt19937_64 rng(3);
  logits = testing::random_matrix(3, 4, rng, 2.0);
  const std::vector<int> labels{1, -1, 3};
  Matrix d;
  const auto r = cross_entropy(logits, labels, &d);
  for (std::size_t c = 0; c < 4; ++c) CHECK(d(1, c) == 0.0);
  for (std::size_t i = 0; i < logits.data.size(); ++i) {
    Matrix up = logits, down = logits;
    up.data[i] += 1e-6;
    down.data[i] -= 1e-6;
    const double numeric =
        (cross_entropy(up, labels, nullptr).loss_sum - cross_entropy(down, labels, nullptr).loss_sum) / 2e-6 / 2.0;
    CHECK(d.data[i] == Approx(numeric).margin(1e-8));
  }
  CHECK(r.loss_sum > 0.0);
  CHECK_THROWS_AS(cross_entropy(logits, {0, 4, 0}, nullptr), ValidationError);
}
