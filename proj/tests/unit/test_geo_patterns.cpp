#include <catch_amalgamated.hpp>

#include <algorithm>
#include <set>

#include "codedvtr/error.hpp"
#include "codedvtr/geo_patterns.hpp"
#include "codedvtr/synth.hpp"
#include "support.hpp"

using namespace cvtr;
using namespace cvtr::patterns;

namespace {

SparseVoxelGrid grid_of(std::vector<VoxelCoord> coords) {
  std::sort(coords.begin(), coords.end());
  SparseVoxelGrid g;
  g.coords = coords;
  g.features = Matrix(coords.size(), 1);
  return g;
}

KModesOptions small_options(int bits) {
  KModesOptions o;
  o.bits = bits;
  o.forced_bit = std::nullopt;
  return o;
}

std::int64_t assignment_cost(const ClusterReport& r, std::span<const OccupancyMask> masks) {
  std::int64_t c = 0;
  for (std::size_t i = 0; i < masks.size(); ++i)
    c += hamming(masks[i], r.centroids[static_cast<std::size_t>(r.assignment[i])]);
  return c;
}

}  // namespace

TEST_CASE("bitstrings round-trip in slot order", "[geo_patterns]") {
  CHECK(mask_to_bits(kCenterBit) == "000000000000010000000000000");
  CHECK(mask_from_bits("100") == 1u);
  CHECK(mask_from_bits(mask_to_bits(0x5a5a5a5u & kFullMask)) == (0x5a5a5a5u & kFullMask));
  CHECK_THROWS_AS(mask_from_bits("10x"), ValidationError);
  CHECK_THROWS_AS(mask_from_bits(""), ValidationError);
}

TEST_CASE("horizontal plane mask has the nine zero-z slots", "[geo_patterns]") {
  const OccupancyMask plane = horizontal_plane_mask();
  CHECK(popcount(plane) == 9);
  for (int o = 0; o < kSlots; ++o) CHECK(((plane >> o) & 1u) == (o % 3 == 1 ? 1u : 0u));
}

TEST_CASE("kmodes solves the three-bit miniature", "[geo_patterns]") {
  std::vector<OccupancyMask> masks;
  for (const char* b : {"000", "001", "110", "111"}) masks.push_back(mask_from_bits(b));
  const auto r = kmodes(masks, 2, small_options(3));
  CHECK(r.cost == 2);
  CHECK(std::set<OccupancyMask>(r.centroids.begin(), r.centroids.end()) ==
        std::set<OccupancyMask>{mask_from_bits("000"), mask_from_bits("110")});
  CHECK(testing::brute_kmodes_cost(masks, 2, 3) == 2);
}

TEST_CASE("kmodes trivial cases", "[geo_patterns]") {
  const std::vector<OccupancyMask> same(6, kCenterBit | 0b101u);
  const auto one = kmodes(same, 1, KModesOptions{});
  CHECK(one.cost == 0);
  CHECK(one.centroids[0] == (kCenterBit | 0b101u));

  std::vector<OccupancyMask> distinct{kCenterBit, kCenterBit | 1u, kCenterBit | 2u, kCenterBit | 4u};
  CHECK(kmodes(distinct, 4, KModesOptions{}).cost == 0);
  CHECK_THROWS_AS(kmodes(same, 2, KModesOptions{}), ValidationError);
  CHECK_THROWS_AS(kmodes(distinct, 0, KModesOptions{}), ValidationError);
}

TEST_CASE("kmodes cost matches its assignment and never increases", "[geo_patterns]") {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 20; ++t) {
    std::vector<OccupancyMask> masks;
    for (int i = 0; i < 200; ++i) masks.push_back((static_cast<OccupancyMask>(rng()) & kFullMask) | kCenterBit);
    KModesOptions o;
    o.seed = static_cast<std::uint64_t>(t);
    o.restarts = 3;
    const auto r = kmodes(masks, 5, o);
    CHECK(r.cost == assignment_cost(r, masks));
    for (std::size_t i = 1; i < r.cost_history.size(); ++i) CHECK(r.cost_history[i] <= r.cost_history[i - 1]);
    for (auto c : r.centroids) CHECK((c & kCenterBit) != 0);
    for (std::size_t i = 0; i < masks.size(); ++i)
      for (std::size_t k = 0; k < r.centroids.size(); ++k)
        CHECK(hamming(masks[i], r.centroids[static_cast<std::size_t>(r.assignment[i])]) <=
              hamming(masks[i], r.centroids[k]));
  }
}

TEST_CASE("kmodes best of restarts is usually the brute-force optimum", "[geo_patterns]") {
  int optimal = 0, total = 0;
  for (std::uint64_t seed = 0; total < 100; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t n = 3 + rng() % 6;
    const int m = 1 + static_cast<int>(rng() % 3);
    std::vector<OccupancyMask> masks;
    for (std::size_t i = 0; i < n; ++i) masks.push_back(static_cast<OccupancyMask>(rng() % 32));
    if (std::set<OccupancyMask>(masks.begin(), masks.end()).size() < static_cast<std::size_t>(m)) continue;
    auto o = small_options(5);
    o.seed = seed;
    ++total;
    optimal += kmodes(masks, m, o).cost == testing::brute_kmodes_cost(masks, m, 5);
  }
  CHECK(optimal >= 90);
}

TEST_CASE("kmodes is deterministic for a seed", "[geo_patterns]") {
  std::mt19937_64 rng(13);
  std::vector<OccupancyMask> masks;
  for (int i = 0; i < 300; ++i) masks.push_back((static_cast<OccupancyMask>(rng()) & kFullMask) | kCenterBit);
  KModesOptions o;
  o.seed = 99;
  const auto a = kmodes(masks, 6, o), b = kmodes(masks, 6, o);
  CHECK(a.centroids == b.centroids);
  CHECK(a.assignment == b.assignment);
}

TEST_CASE("elbow from fixed curves", "[geo_patterns]") {
  const std::vector<int> ms{1, 2, 3, 4};
  const std::vector<double> costs{100, 50, 48, 47};
  const auto e = elbow_from_curve(ms, costs, 0.05);
  CHECK(e.best == 2);
  CHECK(e.saturated);

  std::vector<double> scaled = costs;
  for (double& c : scaled) c *= 37.5;
  CHECK(elbow_from_curve(ms, scaled, 0.05).best == 2);

  const std::vector<double> geometric{64, 32, 16, 8};
  const auto g = elbow_from_curve(ms, geometric, 0.05);
  CHECK(g.best == 4);
  CHECK_FALSE(g.saturated);

  CHECK_THROWS_AS(elbow_from_curve(ms, costs, 0.0), ValidationError);
  const std::vector<int> unordered{1, 3, 2, 4};
  CHECK_THROWS_AS(elbow_from_curve(unordered, costs, 0.05), ValidationError);
}

TEST_CASE("elbow finds four separated generators", "[geo_patterns]") {
  std::mt19937_64 rng(21);
  const auto masks = testing::generator_masks(rng, 100);
  KModesOptions o;
  o.seed = 1;
  const auto e = elbow_select(masks, 1, 8, 0.05, o);
  CHECK(e.best == 4);
  CHECK(e.costs.size() == 8);
}

TEST_CASE("flat floor yields plane masks at stride 1", "[geo_patterns]") {
  std::vector<VoxelCoord> floor;
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) floor.push_back({i, j, 0});
  const std::vector<SparseVoxelGrid> scenes{grid_of(floor)};
  const auto masks = collect_patterns(scenes, 1, 1, 0, 0);
  REQUIRE(masks.size() == 36);
  const auto plane = horizontal_plane_mask();
  CHECK(std::count(masks.begin(), masks.end(), plane) == 16);

  const std::vector<SparseVoxelGrid> single{grid_of({{4, 4, 4}})};
  const auto one = collect_patterns(single, 1, 1, 0, 0);
  REQUIRE(one.size() == 1);
  CHECK(popcount(one[0]) == 1);
}

TEST_CASE("collected masks are the concatenation of per-scene masks", "[geo_patterns]") {
  std::vector<SparseVoxelGrid> scenes;
  std::vector<OccupancyMask> want;
  std::mt19937_64 rng(5);
  for (int s = 0; s < 10; ++s) {
    scenes.push_back(grid_of(testing::random_coords(50 + rng() % 50, 7, rng)));
    const auto m = occupancy_masks(build_neighbor_index(scenes.back(), 2));
    want.insert(want.end(), m.begin(), m.end());
  }
  auto got = collect_patterns(scenes, 1, 2, 0, 0);
  std::sort(got.begin(), got.end());
  std::sort(want.begin(), want.end());
  CHECK(got == want);

  const auto sampled = collect_patterns(scenes, 1, 2, 100, 3);
  CHECK(sampled.size() == 100);
  CHECK(collect_patterns(scenes, 1, 2, 100, 3) == sampled);
}

TEST_CASE("collect patterns at stride 2 uses the downsampled grid", "[geo_patterns]") {
  std::mt19937_64 rng(8);
  const auto g = grid_of(testing::random_coords(300, 12, rng));
  const std::vector<SparseVoxelGrid> scenes{g};
  const auto coarse = downsample(g).grid;
  auto got = collect_patterns(scenes, 2, 1, 0, 0);
  auto want = occupancy_masks(build_neighbor_index(coarse, 1));
  std::sort(got.begin(), got.end());
  std::sort(want.begin(), want.end());
  CHECK(got == want);
  CHECK_THROWS_AS(collect_patterns(scenes, 3, 1, 0, 0), ValidationError);
}

TEST_CASE("empty scenes are skipped with a warning", "[geo_patterns]") {
  const std::vector<SparseVoxelGrid> scenes{grid_of({}), grid_of({{0, 0, 0}, {1, 0, 0}})};
  std::vector<std::string> warnings;
  const auto masks = collect_patterns(scenes, 1, 1, 0, 0, &warnings);
  CHECK(masks.size() == 2);
  CHECK(warnings.size() == 1);
}

TEST_CASE("region codebook build on the synthetic corpus", "[geo_patterns]") {
  synth::CorpusOptions opts;
  opts.scenes = 3;
  std::vector<SparseVoxelGrid> grids;
  for (const auto& spec : synth::make_corpus(opts).train) grids.push_back(voxelize(synth::generate(spec), 0.15));
  BuildOptions b;
  b.sample_count = 800;
  b.restarts = 3;
  const std::vector<int> strides{1, 2};
  const auto cb = build_region_codebook(grids, 3, 8, strides, b);
  for (int s : strides) {
    const auto flat = cb.flat(s);
    CHECK(flat.size() == 24);
    for (auto m : flat) CHECK((m & kCenterBit) != 0);
  }
  const auto again = build_region_codebook(grids, 3, 8, strides, b);
  CHECK(again.dump() == cb.dump());
  CHECK(RegionCodebook::from_json(nlohmann::json::parse(cb.dump())).dump() == cb.dump());
}

TEST_CASE("one region of a dense block is the full cube", "[geo_patterns]") {
  std::vector<VoxelCoord> block;
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j)
      for (int k = 0; k < 6; ++k) block.push_back({i, j, k});
  const std::vector<SparseVoxelGrid> scenes{grid_of(block)};
  const std::vector<int> strides{1};
  BuildOptions b;
  b.sample_count = 0;
  const auto cb = build_region_codebook(scenes, 1, 1, strides, b);
  CHECK(cb.flat(1) == std::vector<OccupancyMask>{kFullMask});
  const auto full = full_cube_codebook(2, 3, strides);
  CHECK(full.flat(1) == std::vector<OccupancyMask>(6, kFullMask));
}

TEST_CASE("malformed codebook files are rejected", "[geo_patterns]") {
  nlohmann::json j = nlohmann::json::parse(full_cube_codebook(1, 1, std::vector<int>{1}).dump());
  j["strides"]["1"]["dilations"]["1"][0] = "000000000000000000000000001";
  CHECK_THROWS_AS(RegionCodebook::from_json(j), ValidationError);
  CHECK_THROWS_AS(RegionCodebook::from_json(nlohmann::json::object({{"M", "x"}})), ValidationError);
}
