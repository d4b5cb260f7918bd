#include "codedvtr/synth.hpp"

#include <cmath>
#include <random>

#include "codedvtr/error.hpp"
#include "codedvtr/random.hpp"

namespace cvtr::synth {

namespace {

using Point = std::array<double, 3>;

struct Sampler {
  std::mt19937_64 rng;
  double falloff;
  double noise;
  PointCloud* out;
  int label;

  void emit(Point p) {
    const double r = std::hypot(p[0], p[1]);
    if (falloff > 0.0 && rnd::uniform01(rng) >= std::exp(-falloff * r)) return;
    if (noise > 0.0)
      for (double& c : p) c += noise * rnd::normal(rng);
    for (double& c : p) c = static_cast<float>(c);
    out->positions.push_back(p);
    out->labels.push_back(label);
  }

  // Rectangle spanned from `origin` along two of the axes.
  void rect(Point origin, int a, double la, int b, double lb, double density) {
    const auto n = static_cast<std::size_t>(std::ceil(density * la * lb));
    for (std::size_t t = 0; t < n; ++t) {
      Point p = origin;
      p[a] += la * rnd::uniform01(rng);
      p[b] += lb * rnd::uniform01(rng);
      emit(p);
    }
  }
};

bool positive(double v) { return std::isfinite(v) && v > 0.0; }

void validate(const Primitive& p, std::size_t index) {
  const auto& e = p.extent;
  bool ok = true;
  switch (p.kind) {
    case PrimitiveKind::floor: ok = positive(e[0]) && positive(e[1]); break;
    case PrimitiveKind::wall: ok = positive(e[2]) && (positive(e[0]) != positive(e[1])); break;
    case PrimitiveKind::corner:
    case PrimitiveKind::scatter: ok = positive(e[0]) && positive(e[1]) && positive(e[2]); break;
    case PrimitiveKind::edge: ok = positive(e[2]); break;
  }
  if (!ok) throw ValidationError("primitive " + std::to_string(index) + " (" + to_string(p.kind) + ") has a degenerate extent");
  if (!positive(p.density)) throw ValidationError("primitive " + std::to_string(index) + " needs a positive density");
  if (p.label < 0 || p.label >= kNumClasses)
    throw ValidationError("primitive " + std::to_string(index) + " label out of range");
  for (double c : p.origin)
    if (!std::isfinite(c)) throw ValidationError("primitive " + std::to_string(index) + " has a non-finite origin");
}

}  // namespace

std::string to_string(PrimitiveKind kind) {
  switch (kind) {
    case PrimitiveKind::floor: return "floor";
    case PrimitiveKind::wall: return "wall";
    case PrimitiveKind::corner: return "corner";
    case PrimitiveKind::edge: return "edge";
    case PrimitiveKind::scatter: return "scatter";
  }
  return "floor";
}

PrimitiveKind primitive_kind_from_string(const std::string& s) {
  for (auto k : {PrimitiveKind::floor, PrimitiveKind::wall, PrimitiveKind::corner, PrimitiveKind::edge,
                 PrimitiveKind::scatter})
    if (to_string(k) == s) return k;
  throw ValidationError("unknown primitive kind '" + s + "'");
}

nlohmann::json SceneSpec::to_json() const {
  nlohmann::json prims = nlohmann::json::array();
  for (const auto& p : primitives)
    prims.push_back({{"kind", to_string(p.kind)},
                     {"origin", p.origin},
                     {"extent", p.extent},
                     {"density", p.density},
                     {"label", p.label}});
  return {{"primitives", prims}, {"falloff", falloff}, {"noise", noise}, {"seed", seed}};
}

SceneSpec SceneSpec::from_json(const nlohmann::json& j) {
  SceneSpec s;
  for (const auto& p : j.at("primitives")) {
    Primitive q;
    q.kind = primitive_kind_from_string(p.at("kind").get<std::string>());
    q.origin = p.at("origin").get<std::array<double, 3>>();
    q.extent = p.at("extent").get<std::array<double, 3>>();
    q.density = p.value("density", q.density);
    q.label = p.value("label", static_cast<int>(q.kind));
    s.primitives.push_back(q);
  }
  s.falloff = j.value("falloff", s.falloff);
  s.noise = j.value("noise", s.noise);
  s.seed = j.value("seed", s.seed);
  return s;
}

PointCloud generate(const SceneSpec& spec) {
  if (spec.primitives.empty()) throw ValidationError("scene needs at least one primitive");
  if (!(spec.falloff >= 0.0) || !(spec.noise >= 0.0)) throw ValidationError("falloff and noise must be >= 0");
  for (std::size_t i = 0; i < spec.primitives.size(); ++i) validate(spec.primitives[i], i);

  PointCloud cloud;
  for (std::size_t i = 0; i < spec.primitives.size(); ++i) {
    const Primitive& p = spec.primitives[i];
    Sampler s{std::mt19937_64(rnd::combine(spec.seed, i)), spec.falloff, spec.noise, &cloud, p.label};
    const Point o = p.origin;
    const auto& e = p.extent;
    switch (p.kind) {
      case PrimitiveKind::floor: s.rect(o, 0, e[0], 1, e[1], p.density); break;
      case PrimitiveKind::wall:
        if (positive(e[0])) s.rect(o, 0, e[0], 2, e[2], p.density);
        else s.rect(o, 1, e[1], 2, e[2], p.density);
        break;
      case PrimitiveKind::corner: {
        // Four sides and a lid.
        s.rect(o, 1, e[1], 2, e[2], p.density);
        s.rect({o[0] + e[0], o[1], o[2]}, 1, e[1], 2, e[2], p.density);
        s.rect(o, 0, e[0], 2, e[2], p.density);
        s.rect({o[0], o[1] + e[1], o[2]}, 0, e[0], 2, e[2], p.density);
        s.rect({o[0], o[1], o[2] + e[2]}, 0, e[0], 1, e[1], p.density);
        break;
      }
      case PrimitiveKind::edge: {
        const auto n = static_cast<std::size_t>(std::ceil(p.density * e[2]));
        for (std::size_t t = 0; t < n; ++t) s.emit({o[0], o[1], o[2] + e[2] * rnd::uniform01(s.rng)});
        break;
      }
      case PrimitiveKind::scatter: {
        const auto n = static_cast<std::size_t>(std::ceil(p.density * e[0] * e[1] * e[2]));
        for (std::size_t t = 0; t < n; ++t) {
          Point q = o;
          for (int a = 0; a < 3; ++a) q[a] += e[a] * rnd::uniform01(s.rng);
          s.emit(q);
        }
        break;
      }
    }
  }
  cloud.features = Matrix(cloud.positions.size(), 0);
  return cloud;
}

SceneSpec random_scene(std::uint64_t seed, const CorpusOptions& options) {
  const double vs = options.voxel_size;
  if (!positive(vs) || !positive(options.half_extent)) throw ValidationError("voxel size and extent must be > 0");
  if (options.min_primitives < 0 || options.max_primitives < options.min_primitives)
    throw ValidationError("invalid primitive count range");
  double total_weight = 0.0;
  for (double w : options.kind_weights) {
    if (!(w >= 0.0)) throw ValidationError("kind weights must be >= 0");
    total_weight += w;
  }
  if (!(total_weight > 0.0)) throw ValidationError("kind weights sum to zero");

  std::mt19937_64 rng(rnd::combine(seed, 0x5ce7e));
  const int cells = std::max(4, static_cast<int>(std::floor(options.half_extent / vs)));
  const auto center = [&](int n) { return (n + 0.5) * vs; };
  const auto pick_int = [&](int lo, int hi) {
    return lo + static_cast<int>(rnd::uniform01(rng) * static_cast<double>(hi - lo + 1));
  };
  // Lengths are whole voxel multiples so opposite faces also sit on centers.
  const auto length = [&](double lo, double hi) {
    return std::max(1, static_cast<int>(std::lround(rnd::uniform(rng, lo, hi) / vs))) * vs;
  };

  SceneSpec spec;
  spec.seed = seed;
  spec.falloff = options.falloff;
  spec.noise = options.noise;
  spec.primitives.push_back({PrimitiveKind::floor,
                             {-cells * vs, -cells * vs, center(0)},
                             {2 * cells * vs, 2 * cells * vs, 0.0},
                             options.surface_density,
                             0});

  const int count = pick_int(options.min_primitives, options.max_primitives);
  for (int t = 0; t < count; ++t) {
    double u = rnd::uniform01(rng) * total_weight;
    int which = 0;
    while (which < 3 && u >= options.kind_weights[which]) u -= options.kind_weights[which++];
    const auto kind = static_cast<PrimitiveKind>(which + 1);
    const Point base{center(pick_int(-cells + 1, cells - 2)), center(pick_int(-cells + 1, cells - 2)), center(1)};
    Primitive p;
    p.kind = kind;
    p.label = static_cast<int>(kind);
    p.origin = base;
    switch (kind) {
      case PrimitiveKind::wall:
        if (rnd::uniform01(rng) < 0.5) p.extent = {length(1.0, 2.5), 0.0, length(0.6, 1.5)};
        else p.extent = {0.0, length(1.0, 2.5), length(0.6, 1.5)};
        p.density = options.surface_density;
        break;
      case PrimitiveKind::corner:
        p.extent = {length(0.4, 1.0), length(0.4, 1.0), length(0.4, 1.0)};
        p.density = options.surface_density;
        break;
      case PrimitiveKind::edge:
        p.extent = {0.0, 0.0, length(0.8, 2.0)};
        p.density = options.line_density;
        break;
      default:
        p.extent = {length(0.5, 1.0), length(0.5, 1.0), length(0.3, 0.8)};
        p.density = options.volume_density;
        break;
    }
    spec.primitives.push_back(p);
  }
  return spec;
}

Corpus make_corpus(const CorpusOptions& options) {
  if (options.scenes < 2) throw ValidationError("a corpus needs at least 2 scenes");
  if (!(options.split >= 0.0 && options.split <= 1.0)) throw ValidationError("split ratio must be in [0, 1]");
  Corpus corpus;
  const auto n_train = static_cast<std::size_t>(std::llround(options.split * static_cast<double>(options.scenes)));
  for (std::size_t i = 0; i < options.scenes; ++i) {
    SceneSpec s = random_scene(rnd::combine(options.seed, i), options);
    (i < n_train ? corpus.train : corpus.val).push_back(std::move(s));
  }
  if (corpus.val.empty()) corpus.warnings.push_back("split ratio leaves the validation set empty");
  if (corpus.train.empty()) corpus.warnings.push_back("split ratio leaves the training set empty");
  return corpus;
}

}  // namespace cvtr::synth
