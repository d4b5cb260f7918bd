#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <tuple>

#include "codedvtr/error.hpp"
#include "codedvtr/reference.hpp"
#include "codedvtr/scene_io.hpp"
#include "codedvtr/voxel_grid.hpp"
#include "support.hpp"

using namespace cvtr;
using Catch::Approx;

namespace {

PointCloud cloud_with_features(std::vector<std::array<double, 3>> pos, std::vector<double> feat) {
  PointCloud pc;
  pc.positions = std::move(pos);
  pc.features = Matrix(pc.positions.size(), 1);
  for (std::size_t i = 0; i < feat.size(); ++i) pc.features(i, 0) = feat[i];
  return pc;
}

SparseVoxelGrid grid_of(std::vector<VoxelCoord> coords) {
  std::sort(coords.begin(), coords.end());
  SparseVoxelGrid g;
  g.coords = coords;
  g.features = Matrix(coords.size(), 1);
  return g;
}

}  // namespace

TEST_CASE("voxelize merges points by floor division and feature mean", "[voxel_grid]") {
  const auto g = voxelize(cloud_with_features({{0.12, 0.05, 0.00}, {0.18, 0.09, 0.02}}, {1.0, 3.0}), 0.1);
  REQUIRE(g.size() == 1);
  CHECK(g.coords[0] == VoxelCoord{1, 0, 0});
  CHECK(g.features(0, 0) == 2.0);

  const auto single = voxelize(cloud_with_features({{0.0, 0.0, 0.0}}, {7.5}), 0.1);
  REQUIRE(single.size() == 1);
  CHECK(single.coords[0] == VoxelCoord{0, 0, 0});
  CHECK(single.features(0, 0) == 7.5);
}

TEST_CASE("voxel count matches a hash-set of floor triples", "[voxel_grid]") {
  std::mt19937_64 rng(42);
  PointCloud pc;
  for (int i = 0; i < 1000; ++i)
    pc.positions.push_back({rnd::uniform01(rng), rnd::uniform01(rng), rnd::uniform01(rng)});
  std::set<std::tuple<long, long, long>> cells;
  for (const auto& p : pc.positions)
    cells.insert({std::lround(std::floor(p[0] / 0.05)), std::lround(std::floor(p[1] / 0.05)),
                  std::lround(std::floor(p[2] / 0.05))});
  const auto g = voxelize(pc, 0.05);
  CHECK(g.size() == cells.size());
  CHECK(std::is_sorted(g.coords.begin(), g.coords.end()));
}

TEST_CASE("voxelize takes the majority label with ties to the smaller id", "[voxel_grid]") {
  PointCloud pc;
  pc.positions = {{0.1, 0.1, 0.1}, {0.2, 0.2, 0.2}, {0.3, 0.3, 0.3}, {1.5, 0.1, 0.1}, {1.6, 0.1, 0.1}};
  pc.labels = {2, 1, 2, 4, 3};
  const auto g = voxelize(pc, 1.0);
  REQUIRE(g.size() == 2);
  CHECK(g.labels[0] == 2);
  CHECK(g.labels[1] == 3);
}

TEST_CASE("voxelize is invariant to point order", "[voxel_grid]") {
  std::mt19937_64 rng(3);
  PointCloud pc;
  pc.features = Matrix(300, 2);
  for (int i = 0; i < 300; ++i) {
    pc.positions.push_back({rnd::uniform01(rng), rnd::uniform01(rng), rnd::uniform01(rng)});
    pc.features(i, 0) = rnd::normal(rng);
    pc.features(i, 1) = rnd::normal(rng);
    pc.labels.push_back(static_cast<int>(rng() % 3));
  }
  std::vector<std::size_t> perm(300);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  PointCloud shuffled;
  shuffled.features = Matrix(300, 2);
  for (std::size_t i = 0; i < 300; ++i) {
    shuffled.positions.push_back(pc.positions[perm[i]]);
    shuffled.features(i, 0) = pc.features(perm[i], 0);
    shuffled.features(i, 1) = pc.features(perm[i], 1);
    shuffled.labels.push_back(pc.labels[perm[i]]);
  }
  const auto a = voxelize(pc, 0.2), b = voxelize(shuffled, 0.2);
  CHECK(a.coords == b.coords);
  CHECK(a.features == b.features);
  CHECK(a.labels == b.labels);
}

TEST_CASE("voxelize rejects bad sizes and out-of-range points", "[voxel_grid]") {
  const auto pc = cloud_with_features({{0.0, 0.0, 0.0}}, {1.0});
  CHECK_THROWS_AS(voxelize(pc, 0.0), ValidationError);
  CHECK_THROWS_AS(voxelize(pc, -1.0), ValidationError);
  const auto far = cloud_with_features({{1e12, 0.0, 0.0}}, {1.0});
  CHECK_THROWS_AS(voxelize(far, 0.1), ValidationError);
}

TEST_CASE("coordinate table resolves every key and rejects duplicates", "[voxel_grid]") {
  std::mt19937_64 rng(9);
  const auto coords = testing::random_coords(500, 20, rng);
  const CoordTable table(coords);
  for (std::size_t r = 0; r < coords.size(); ++r) CHECK(table.find(coords[r]) == static_cast<int>(r));
  CHECK(table.find({100, 100, 100}) == kAbsent);
  const std::vector<VoxelCoord> dup{{0, 0, 0}, {0, 0, 0}};
  CHECK_THROWS_AS(CoordTable(dup), StructuralError);
}

TEST_CASE("neighbor index of an isolated voxel holds only itself", "[voxel_grid]") {
  const auto idx = build_neighbor_index(grid_of({{5, 5, 5}}), 1);
  for (int o = 0; o < kSlots; ++o) CHECK(idx.slots[0][o] == (o == kCenterSlot ? 0 : kAbsent));
  CHECK(popcount(occupancy_masks(idx)[0]) == 1);
}

TEST_CASE("dense block center sees all 27 neighbors", "[voxel_grid]") {
  std::vector<VoxelCoord> cube;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) cube.push_back({i, j, k});
  const auto g = grid_of(cube);
  const auto idx = build_neighbor_index(g, 1);
  const auto center = std::find(g.coords.begin(), g.coords.end(), VoxelCoord{1, 1, 1}) - g.coords.begin();
  for (int o = 0; o < kSlots; ++o) CHECK(idx.slots[center][o] != kAbsent);
  CHECK(occupancy_masks(idx)[center] == kFullMask);
}

TEST_CASE("plane interior mask is the nine zero-z slots", "[voxel_grid]") {
  std::vector<VoxelCoord> plane;
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) plane.push_back({i, j, 0});
  const auto g = grid_of(plane);
  const auto masks = occupancy_masks(build_neighbor_index(g, 1));
  OccupancyMask want = 0;
  for (int a = -1; a <= 1; ++a)
    for (int b = -1; b <= 1; ++b) want |= 1u << ((a + 1) * 9 + (b + 1) * 3 + 1);
  const auto row = std::find(g.coords.begin(), g.coords.end(), VoxelCoord{2, 2, 0}) - g.coords.begin();
  CHECK(masks[row] == want);
  CHECK(popcount(want) == 9);
}

TEST_CASE("neighbor index matches the quadratic scan and the reference", "[voxel_grid]") {
  std::mt19937_64 rng(17);
  for (int dilation : {1, 2, 3}) {
    const auto g = grid_of(testing::random_coords(200, 9, rng));
    const auto idx = build_neighbor_index(g, dilation);
    const auto ref = reference::neighbor_index(g.coords, dilation);
    for (std::size_t v = 0; v < g.size(); ++v)
      for (int o = 0; o < kSlots; ++o) {
        CHECK(idx.slots[v][o] == testing::brute_neighbor(g.coords, v, o, dilation));
        CHECK(ref.slots[v][o] == idx.slots[v][o]);
      }
  }
}

TEST_CASE("neighbor relation is symmetric through the opposite slot", "[voxel_grid]") {
  std::mt19937_64 rng(23);
  const auto g = grid_of(testing::random_coords(300, 8, rng));
  for (int dilation : {1, 2}) {
    const auto idx = build_neighbor_index(g, dilation);
    for (std::size_t v = 0; v < g.size(); ++v)
      for (int o = 0; o < kSlots; ++o) {
        const int u = idx.slots[v][o];
        if (u != kAbsent) CHECK(idx.slots[u][opposite_slot(o)] == static_cast<int>(v));
      }
  }
}

TEST_CASE("occupancy masks are translation invariant", "[voxel_grid]") {
  std::mt19937_64 rng(29);
  const auto coords = testing::random_coords(150, 7, rng);
  std::vector<VoxelCoord> moved;
  for (auto c : coords) moved.push_back(c + VoxelCoord{-40, 13, 1000});
  const auto a = occupancy_masks(build_neighbor_index(grid_of(coords), 2));
  const auto b = occupancy_masks(build_neighbor_index(grid_of(moved), 2));
  CHECK(a == b);
}

TEST_CASE("downsample keeps the max feature per parent", "[voxel_grid]") {
  SparseVoxelGrid g = grid_of({{0, 0, 0}, {1, 0, 0}});
  g.features(0, 0) = 1.0;
  g.features(1, 0) = 5.0;
  const auto d = downsample(g);
  REQUIRE(d.grid.size() == 1);
  CHECK(d.grid.coords[0] == VoxelCoord{0, 0, 0});
  CHECK(d.grid.features(0, 0) == 5.0);
  CHECK(d.grid.stride == 2);

  SparseVoxelGrid one = grid_of({{3, -2, 7}});
  one.features(0, 0) = 4.25;
  const auto d1 = downsample(one);
  REQUIRE(d1.grid.size() == 1);
  CHECK(d1.grid.features(0, 0) == 4.25);
}

TEST_CASE("downsample count matches distinct halved coordinates", "[voxel_grid]") {
  std::mt19937_64 rng(31);
  std::vector<VoxelCoord> coords = testing::random_coords(400, 15, rng);
  for (auto& c : coords) c = c + VoxelCoord{-7, -7, -7};  // negatives floor toward -inf
  const auto g = grid_of(coords);
  std::set<VoxelCoord> halves, quarters;
  auto fdiv = [](int a, int b) { return static_cast<int>(std::floor(static_cast<double>(a) / b)); };
  for (auto c : coords) {
    halves.insert({fdiv(c.i, 2), fdiv(c.j, 2), fdiv(c.k, 2)});
    quarters.insert({fdiv(c.i, 4), fdiv(c.j, 4), fdiv(c.k, 4)});
  }
  const auto d = downsample(g);
  CHECK(d.grid.size() == halves.size());
  CHECK(std::set<VoxelCoord>(d.grid.coords.begin(), d.grid.coords.end()) == halves);
  const auto dd = downsample(d.grid);
  CHECK(std::set<VoxelCoord>(dd.grid.coords.begin(), dd.grid.coords.end()) == quarters);
}

TEST_CASE("upsample copies each parent row to its children", "[voxel_grid]") {
  std::mt19937_64 rng(37);
  SparseVoxelGrid g = grid_of(testing::random_coords(200, 10, rng));
  g.features = testing::random_matrix(g.size(), 3, rng);
  const auto d = downsample(g);
  const Matrix up = upsample(d.grid.features, d.map);
  REQUIRE(up.rows == g.size());
  auto fdiv = [](int a) { return static_cast<int>(std::floor(a / 2.0)); };
  for (std::size_t v = 0; v < g.size(); ++v) {
    const VoxelCoord parent{fdiv(g.coords[v].i), fdiv(g.coords[v].j), fdiv(g.coords[v].k)};
    const auto p = std::find(d.grid.coords.begin(), d.grid.coords.end(), parent) - d.grid.coords.begin();
    for (std::size_t c = 0; c < 3; ++c) CHECK(up(v, c) == d.grid.features(p, c));
  }

  SparseVoxelGrid constant = g;
  for (double& x : constant.features.data) x = 2.5;
  const auto dc = downsample(constant);
  for (double x : upsample(dc.grid.features, dc.map).data) CHECK(x == 2.5);

  SparseVoxelGrid three = grid_of({{0, 0, 0}, {0, 1, 0}, {1, 1, 1}});
  const auto d3 = downsample(three);
  const Matrix u3 = upsample(d3.grid.features, d3.map);
  CHECK(u3.rows == 3);
  CHECK(d3.grid.size() == 1);
}

TEST_CASE("scene files round-trip through PLY and CSV", "[voxel_grid]") {
  PointCloud pc;
  pc.positions = {{0.5, -1.25, 2.0}, {3.0, 0.125, -0.5}};
  pc.labels = {1, 4};
  const auto dir = std::filesystem::temp_directory_path() / "codedvtr_scene_io";
  std::filesystem::create_directories(dir);
  for (const char* name : {"s.ply", "s.csv"}) {
    const auto path = (dir / name).string();
    io::write_scene(path, pc);
    const auto back = io::read_scene(path);
    REQUIRE(back.size() == 2);
    CHECK(back.labels == pc.labels);
    for (std::size_t i = 0; i < 2; ++i)
      for (int a = 0; a < 3; ++a) CHECK(back.positions[i][a] == Approx(pc.positions[i][a]));
  }
  io::write_text((dir / "bad.ply").string(), "not a ply\n");
  CHECK_THROWS_AS(io::read_scene((dir / "bad.ply").string()), IoError);
  CHECK_THROWS_AS(io::read_scene((dir / "missing.csv").string()), IoError);
  CHECK_THROWS_AS(io::write_scene((dir / "s.xyz").string(), pc), IoError);
}
