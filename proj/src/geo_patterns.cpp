#include "codedvtr/geo_patterns.hpp"

#include <algorithm>
#include <bit>
#include <numeric>
#include <random>
#include <set>

#include "codedvtr/error.hpp"

namespace cvtr::patterns {

namespace {

std::uint64_t restart_seed(std::uint64_t seed, int restart) {
  std::uint64_t x = seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(restart) + 1;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

struct Assignment {
  std::vector<int> labels;
  std::int64_t cost = 0;
};

Assignment assign(std::span<const OccupancyMask> masks, std::span<const OccupancyMask> centroids) {
  Assignment a;
  a.labels.resize(masks.size());
  for (std::size_t s = 0; s < masks.size(); ++s) {
    int best = 0;
    int best_d = hamming(masks[s], centroids[0]);
    for (std::size_t c = 1; c < centroids.size(); ++c) {
      const int d = hamming(masks[s], centroids[c]);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    a.labels[s] = best;
    a.cost += best_d;
  }
  return a;
}

ClusterReport run_once(std::span<const OccupancyMask> masks, std::span<const OccupancyMask> distinct, int clusters,
                       const KModesOptions& options, int restart) {
  const OccupancyMask forced = options.forced_bit ? (1u << *options.forced_bit) : 0u;
  std::mt19937_64 rng(restart_seed(options.seed, restart));
  std::vector<OccupancyMask> pool(distinct.begin(), distinct.end());
  std::vector<OccupancyMask> centroids(clusters);
  for (int c = 0; c < clusters; ++c) {
    const std::size_t j = c + rng() % (pool.size() - c);
    std::swap(pool[c], pool[j]);
    centroids[c] = pool[c] | forced;
  }

  ClusterReport report;
  report.clusters = clusters;
  report.restart = restart;
  Assignment current = assign(masks, centroids);
  report.cost_history.push_back(current.cost);
  for (int it = 0; it < options.max_iterations; ++it) {
    std::vector<std::vector<int>> ones(clusters, std::vector<int>(options.bits, 0));
    std::vector<int> sizes(clusters, 0);
    for (std::size_t s = 0; s < masks.size(); ++s) {
      const int c = current.labels[s];
      ++sizes[c];
      for (int b = 0; b < options.bits; ++b) ones[c][b] += (masks[s] >> b) & 1u;
    }
    for (int c = 0; c < clusters; ++c) {
      if (sizes[c] == 0) continue;  // empty cluster keeps its centroid
      OccupancyMask m = 0;
      for (int b = 0; b < options.bits; ++b)
        if (2 * ones[c][b] > sizes[c]) m |= 1u << b;
      centroids[c] = m | forced;
    }
    Assignment next = assign(masks, centroids);
    ++report.iterations;
    if (next.cost > current.cost) throw NumericalError("kmodes: cost increased between iterations");
    report.cost_history.push_back(next.cost);
    const bool stable = next.labels == current.labels;
    current = std::move(next);
    if (stable) break;
  }
  report.cost = current.cost;
  report.assignment = std::move(current.labels);
  report.centroids = std::move(centroids);
  return report;
}

}  // namespace

int hamming(OccupancyMask a, OccupancyMask b) { return std::popcount(a ^ b); }

ClusterReport kmodes(std::span<const OccupancyMask> masks, int clusters, const KModesOptions& options) {
  if (clusters < 1) throw ValidationError("kmodes: M must be >= 1");
  if (options.restarts < 1) throw ValidationError("kmodes: restarts must be >= 1");
  if (options.bits < 1 || options.bits > 32) throw ValidationError("kmodes: bits must be in [1, 32]");
  if (masks.size() < static_cast<std::size_t>(clusters))
    throw ValidationError("kmodes: M=" + std::to_string(clusters) + " exceeds the " + std::to_string(masks.size()) +
                          " samples");
  const std::set<OccupancyMask> unique(masks.begin(), masks.end());
  if (unique.size() < static_cast<std::size_t>(clusters))
    throw ValidationError("kmodes: M=" + std::to_string(clusters) + " exceeds the " + std::to_string(unique.size()) +
                          " distinct masks");
  const std::vector<OccupancyMask> distinct(unique.begin(), unique.end());

  std::vector<ClusterReport> runs(options.restarts);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < options.restarts; ++r) runs[r] = run_once(masks, distinct, clusters, options, r);

  std::size_t best = 0;
  for (std::size_t r = 1; r < runs.size(); ++r)
    if (runs[r].cost < runs[best].cost) best = r;
  return std::move(runs[best]);
}

std::vector<OccupancyMask> collect_patterns(std::span<const SparseVoxelGrid> scenes, int stride, int dilation,
                                            std::size_t sample_count, std::uint64_t seed,
                                            std::vector<std::string>* warnings) {
  if (scenes.empty()) throw ValidationError("collect_patterns: no scenes");
  if (stride < 1 || !std::has_single_bit(static_cast<unsigned>(stride)))
    throw ValidationError("collect_patterns: stride must be a power of two");
  std::vector<OccupancyMask> all;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    if (scenes[s].stride > stride)
      throw ValidationError("collect_patterns: scene stride exceeds requested stride");
    SparseVoxelGrid grid = scenes[s];
    while (grid.stride < stride && grid.size() > 0) grid = downsample(grid).grid;
    if (grid.size() == 0) {
      if (warnings) warnings->push_back("scene " + std::to_string(s) + " is empty at stride " + std::to_string(stride));
      continue;
    }
    const auto masks = occupancy_masks(build_neighbor_index(grid, dilation));
    all.insert(all.end(), masks.begin(), masks.end());
  }
  if (sample_count == 0 || sample_count >= all.size()) return all;

  std::vector<std::size_t> picks(all.size());
  std::iota(picks.begin(), picks.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < sample_count; ++i) std::swap(picks[i], picks[i + rng() % (picks.size() - i)]);
  picks.resize(sample_count);
  std::sort(picks.begin(), picks.end());
  std::vector<OccupancyMask> sampled;
  sampled.reserve(sample_count);
  for (std::size_t p : picks) sampled.push_back(all[p]);
  return sampled;
}

ElbowResult elbow_from_curve(std::span<const int> m_values, std::span<const double> costs, double threshold) {
  if (m_values.empty() || m_values.size() != costs.size()) throw ValidationError("elbow: empty or mismatched curve");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ValidationError("elbow: threshold must be in (0, 1)");
  for (std::size_t i = 1; i < m_values.size(); ++i)
    if (m_values[i] <= m_values[i - 1]) throw ValidationError("elbow: M range must be ascending");
  ElbowResult r;
  r.m_values.assign(m_values.begin(), m_values.end());
  r.costs.assign(costs.begin(), costs.end());
  for (std::size_t i = 0; i + 1 < costs.size(); ++i) {
    if (costs[i] == 0.0 || costs[i] - costs[i + 1] < threshold * costs[i]) {
      r.best = m_values[i];
      r.saturated = true;
      return r;
    }
  }
  r.best = m_values.back();
  r.saturated = costs.back() == 0.0;
  return r;
}

ElbowResult elbow_select(std::span<const OccupancyMask> masks, int m_min, int m_max, double threshold,
                         const KModesOptions& options) {
  if (m_min < 1 || m_max < m_min) throw ValidationError("elbow: invalid M range");
  std::vector<int> ms;
  std::vector<double> costs;
  for (int m = m_min; m <= m_max; ++m) {
    ms.push_back(m);
    costs.push_back(static_cast<double>(kmodes(masks, m, options).cost));
  }
  return elbow_from_curve(ms, costs, threshold);
}

std::vector<OccupancyMask> RegionCodebook::flat(int stride) const {
  const auto it = regions.find(stride);
  if (it == regions.end()) throw ValidationError("region codebook has no stride " + std::to_string(stride));
  std::vector<OccupancyMask> out(static_cast<std::size_t>(shapes * dilations));
  for (int j = 0; j < dilations; ++j) {
    const auto& per = it->second.at(j + 1);
    if (per.size() != static_cast<std::size_t>(shapes)) throw StructuralError("region codebook: wrong shape count");
    for (int i = 0; i < shapes; ++i) out[static_cast<std::size_t>(i * dilations + j)] = per[i];
  }
  return out;
}

nlohmann::json RegionCodebook::to_json() const {
  nlohmann::json j;
  j["M"] = shapes;
  j["D"] = dilations;
  j["seed"] = seed;
  nlohmann::json strides = nlohmann::json::object();
  for (const auto& [stride, per_dilation] : regions) {
    nlohmann::json dil = nlohmann::json::object();
    for (const auto& [d, masks] : per_dilation) {
      nlohmann::json arr = nlohmann::json::array();
      for (OccupancyMask m : masks) arr.push_back(mask_to_bits(m));
      dil[std::to_string(d)] = arr;
    }
    strides[std::to_string(stride)] = {{"dilations", dil}};
  }
  j["strides"] = strides;
  nlohmann::json curve = nlohmann::json::object();
  for (const auto& [stride, per_dilation] : cost_curve)
    for (const auto& [d, costs] : per_dilation) curve[std::to_string(stride)][std::to_string(d)] = costs;
  j["cost_curve"] = curve;
  return j;
}

RegionCodebook RegionCodebook::from_json(const nlohmann::json& j) {
  RegionCodebook cb;
  try {
    cb.shapes = j.at("M").get<int>();
    cb.dilations = j.at("D").get<int>();
    cb.seed = j.value("seed", std::uint64_t{0});
    for (const auto& [stride, body] : j.at("strides").items()) {
      for (const auto& [d, masks] : body.at("dilations").items()) {
        auto& out = cb.regions[std::stoi(stride)][std::stoi(d)];
        for (const auto& m : masks) {
          const OccupancyMask mask = mask_from_bits(m.get<std::string>());
          if (!(mask & kCenterBit)) throw ValidationError("region codebook: region without center bit");
          out.push_back(mask);
        }
      }
    }
    if (j.contains("cost_curve"))
      for (const auto& [stride, body] : j.at("cost_curve").items())
        for (const auto& [d, costs] : body.items())
          cb.cost_curve[std::stoi(stride)][std::stoi(d)] = costs.get<std::vector<std::int64_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("region codebook: malformed JSON: ") + e.what());
  }
  for (const auto& [stride, per] : cb.regions) {
    if (static_cast<int>(per.size()) != cb.dilations)
      throw ValidationError("region codebook: stride " + std::to_string(stride) + " lacks some dilations");
    for (const auto& [d, masks] : per)
      if (static_cast<int>(masks.size()) != cb.shapes)
        throw ValidationError("region codebook: wrong number of shapes at dilation " + std::to_string(d));
  }
  return cb;
}

std::string RegionCodebook::dump() const { return to_json().dump(2) + "\n"; }

namespace {

// Reorders `centroids` so shape i best matches reference shape i (minimum
// total Hamming distance; exhaustive for M <= 8, greedy beyond).
std::vector<OccupancyMask> align_to(const std::vector<OccupancyMask>& reference, std::vector<OccupancyMask> centroids) {
  const std::size_t m = centroids.size();
  if (m <= 8) {
    std::vector<std::size_t> perm(m), best;
    std::iota(perm.begin(), perm.end(), 0);
    int best_cost = -1;
    do {
      int cost = 0;
      for (std::size_t i = 0; i < m; ++i) cost += hamming(reference[i], centroids[perm[i]]);
      if (best_cost < 0 || cost < best_cost) {
        best_cost = cost;
        best = perm;
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
    std::vector<OccupancyMask> out(m);
    for (std::size_t i = 0; i < m; ++i) out[i] = centroids[best[i]];
    return out;
  }
  std::vector<OccupancyMask> out(m);
  std::vector<bool> used(m, false);
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t pick = 0;
    int pick_d = 1 << 30;
    for (std::size_t c = 0; c < m; ++c) {
      if (used[c]) continue;
      const int d = hamming(reference[i], centroids[c]);
      if (d < pick_d) {
        pick_d = d;
        pick = c;
      }
    }
    used[pick] = true;
    out[i] = centroids[pick];
  }
  return out;
}

}  // namespace

RegionCodebook build_region_codebook(std::span<const SparseVoxelGrid> scenes, int dilations, int shapes,
                                     std::span<const int> strides, const BuildOptions& options) {
  if (dilations < 1 || shapes < 1) throw ValidationError("build_region_codebook: D and M must be >= 1");
  if (scenes.empty()) throw ValidationError("build_region_codebook: no scenes");

  std::vector<SparseVoxelGrid> chosen;
  if (options.scene_count == 0 || options.scene_count >= scenes.size()) {
    chosen.assign(scenes.begin(), scenes.end());
  } else {
    std::vector<std::size_t> idx(scenes.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(options.seed);
    for (std::size_t i = 0; i < options.scene_count; ++i) std::swap(idx[i], idx[i + rng() % (idx.size() - i)]);
    idx.resize(options.scene_count);
    std::sort(idx.begin(), idx.end());
    for (std::size_t i : idx) chosen.push_back(scenes[i]);
  }

  RegionCodebook cb;
  cb.shapes = shapes;
  cb.dilations = dilations;
  cb.seed = options.seed;
  KModesOptions km;
  km.restarts = options.restarts;
  for (int stride : strides) {
    std::vector<OccupancyMask> reference;
    for (int d = 1; d <= dilations; ++d) {
      const std::uint64_t sub = options.seed ^ (static_cast<std::uint64_t>(stride) << 32) ^ static_cast<std::uint64_t>(d);
      const auto masks = collect_patterns(chosen, stride, d, options.sample_count, sub);
      km.seed = sub;
      auto& curve = cb.cost_curve[stride][d];
      ClusterReport final_report;
      for (int m = 1; m <= shapes; ++m) {
        ClusterReport r = kmodes(masks, m, km);
        curve.push_back(r.cost);
        if (m == shapes) final_report = std::move(r);
      }
      auto centroids = final_report.centroids;
      if (d == 1) {
        std::sort(centroids.begin(), centroids.end(), [](OccupancyMask a, OccupancyMask b) {
          const int pa = popcount(a), pb = popcount(b);
          return pa != pb ? pa > pb : a < b;
        });
        reference = centroids;
      } else {
        centroids = align_to(reference, std::move(centroids));
      }
      cb.regions[stride][d] = std::move(centroids);
    }
  }
  return cb;
}

RegionCodebook full_cube_codebook(int shapes, int dilations, std::span<const int> strides) {
  RegionCodebook cb;
  cb.shapes = shapes;
  cb.dilations = dilations;
  for (int stride : strides)
    for (int d = 1; d <= dilations; ++d) cb.regions[stride][d].assign(static_cast<std::size_t>(shapes), kFullMask);
  return cb;
}

std::string mask_to_bits(OccupancyMask mask, int bits) {
  std::string s(static_cast<std::size_t>(bits), '0');
  for (int b = 0; b < bits; ++b)
    if ((mask >> b) & 1u) s[static_cast<std::size_t>(b)] = '1';
  return s;
}

OccupancyMask mask_from_bits(const std::string& bits) {
  if (bits.empty() || bits.size() > 32) throw ValidationError("mask bitstring has invalid length");
  OccupancyMask m = 0;
  for (std::size_t b = 0; b < bits.size(); ++b) {
    if (bits[b] == '1')
      m |= 1u << b;
    else if (bits[b] != '0')
      throw ValidationError("mask bitstring contains '" + std::string(1, bits[b]) + "'");
  }
  return m;
}

OccupancyMask horizontal_plane_mask() {
  OccupancyMask m = 0;
  for (int o = 0; o < kSlots; ++o)
    if (o % 3 == 1) m |= 1u << o;
  return m;
}

}  // namespace cvtr::patterns
