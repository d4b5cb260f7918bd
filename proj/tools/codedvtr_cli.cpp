// codedvtr: command line front end for every pipeline stage.
//
// Exit codes: 0 success, 1 validation or structural error, 2 numerical
// failure, 3 I/O error.

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "codedvtr/bench.hpp"
#include "codedvtr/checkpoint.hpp"
#include "codedvtr/config.hpp"
#include "codedvtr/diagnostics.hpp"
#include "codedvtr/error.hpp"
#include "codedvtr/finite_diff.hpp"
#include "codedvtr/geo_patterns.hpp"
#include "codedvtr/parallel.hpp"
#include "codedvtr/pipeline.hpp"
#include "codedvtr/scene_io.hpp"
#include "codedvtr/synth.hpp"
#include "codedvtr/train.hpp"

namespace fs = std::filesystem;
using namespace cvtr;
using nlohmann::json;

namespace {

struct Common {
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::string out;
};

void add_common(CLI::App* app, Common& c, bool out_required = true) {
  app->add_option("--seed", c.seed, "random seed");
  app->add_option("--threads", c.threads, "worker threads (numeric results do not depend on it)");
  auto* o = app->add_option("--out", c.out, "output path");
  if (out_required) o->required();
}

void write_json(const std::string& path, const json& j) { io::write_text(path, j.dump(2) + "\n"); }

fs::path ensure_dir(const std::string& dir) {
  fs::create_directories(dir);
  return fs::path(dir);
}

std::string bits_list(const std::vector<OccupancyMask>& masks) {
  std::string s;
  for (auto m : masks) s += patterns::mask_to_bits(m) + " ";
  return s;
}

// Scene grids from files or corpus directories (training part).
std::vector<SparseVoxelGrid> load_grids(const std::vector<std::string>& inputs, double voxel_size) {
  std::vector<SparseVoxelGrid> grids;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      DataConfig d;
      d.scene_dir = in;
      d.voxel_size = voxel_size;
      Dataset ds = load_dataset(d);
      for (auto& g : ds.train) grids.push_back(std::move(g));
    } else {
      grids.push_back(voxelize(io::read_scene(in), voxel_size));
    }
  }
  if (grids.empty()) throw ValidationError("no input scenes");
  return grids;
}

std::vector<OccupancyMask> load_masks(const std::vector<std::string>& inputs, double voxel_size, int stride,
                                      int dilation, std::size_t samples, std::uint64_t seed) {
  if (inputs.size() == 1 && inputs[0].ends_with(".json")) {
    const json j = json::parse(io::read_text(inputs[0]), nullptr, false);
    if (j.is_discarded() || !j.contains("masks")) throw ValidationError(inputs[0] + ": not a mask file");
    std::vector<OccupancyMask> masks;
    for (const auto& b : j["masks"]) masks.push_back(patterns::mask_from_bits(b.get<std::string>()));
    return masks;
  }
  const auto grids = load_grids(inputs, voxel_size);
  std::vector<std::string> warnings;
  auto masks = patterns::collect_patterns(grids, stride, dilation, samples, seed, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  return masks;
}

RunConfig run_config(const std::string& path, const std::vector<std::string>& sets, const Common& c) {
  RunConfig cfg = load_run_config(path, sets);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

void print_epoch(const std::string& tag, const EpochStats& e) {
  std::printf("%sepoch %3d  T %.4f  train loss %.5f acc %.4f", tag.c_str(), e.epoch, e.temperature, e.train_loss,
              e.train_acc);
  if (e.has_val) std::printf("  val loss %.5f acc %.4f mIoU %.4f", e.val.loss, e.val.accuracy, e.val.mean_iou);
  std::printf("\n");
  std::fflush(stdout);
}

struct TrainedRun {
  RunConfig config;
  std::optional<patterns::RegionCodebook> codebook;
  TrainReport report;
  std::optional<Model> model;
};

// Builds, trains and writes checkpoint.bin, report.json, config.json and
// (coded with regions) codebook.json under `dir`.
TrainedRun train_run(const RunConfig& cfg, const Dataset& data, const fs::path& dir, const std::string& tag) {
  TrainedRun run;
  run.config = cfg;
  run.codebook = obtain_codebook(cfg, data);
  run.model.emplace(build_model(cfg, run.codebook));
  const auto train_set = prepare_scenes(data.train, cfg.model);
  const auto val_set = prepare_scenes(data.val, cfg.model);
  fs::create_directories(dir);
  write_json((dir / "config.json").string(), cfg.to_json());
  if (run.codebook) io::write_text((dir / "codebook.json").string(), run.codebook->dump());
  std::printf("%s%zu trainable parameters, %zu train / %zu val scenes\n", tag.c_str(),
              run.model->store().trainable_size(), train_set.size(), val_set.size());
  const auto ckpt = (dir / "checkpoint.bin").string();
  try {
    run.report = train_model(*run.model, train_set, val_set, cfg.train, cfg.optimizer, cfg.seed,
                             [&](const EpochStats& e) { print_epoch(tag, e); });
  } catch (const NumericalError&) {
    save_checkpoint(ckpt, *run.model, cfg.optimizer, cfg.seed, {{"status", "aborted"}});
    throw;
  }
  save_checkpoint(ckpt, *run.model, cfg.optimizer, cfg.seed);
  run.report.checkpoint = "checkpoint.bin";
  write_json((dir / "report.json").string(), run.report.to_json());
  std::fprintf(stderr, "%strained in %.1f s\n", tag.c_str(), run.report.wall_seconds);
  return run;
}

std::vector<PreparedScene> scenes_for(const Model& model, const Dataset& data, const std::string& split) {
  std::vector<SparseVoxelGrid> grids;
  if (split == "train" || split == "all") grids.insert(grids.end(), data.train.begin(), data.train.end());
  if (split == "val" || split == "all") grids.insert(grids.end(), data.val.begin(), data.val.end());
  if (split != "train" && split != "val" && split != "all") throw ValidationError("split must be train, val or all");
  if (grids.empty()) throw ValidationError("split '" + split + "' has no scenes");
  return prepare_scenes(grids, model.config());
}

int run_gradcheck(const Common& c, int n, int channels, int heads, int m, int d, int seeds, double threshold) {
  json runs = json::array();
  double worst = 0.0;
  const std::uint64_t base = c.seed.value_or(0);
  for (int s = 0; s < seeds; ++s) {
    const std::uint64_t seed = base + static_cast<std::uint64_t>(s);
    BlockSpec spec;
    spec.channels = channels;
    spec.heads = heads;
    spec.shapes = m;
    spec.dilations = d;
    // About three cells per voxel keeps most neighborhoods partially filled.
    const int box = std::max(2, static_cast<int>(std::ceil(std::cbrt(3.0 * n))));
    const BlockCheck check = block_gradcheck(seed, spec, static_cast<std::size_t>(n), box);
    const auto& report = check.report;
    const double err = std::max(check.param_rel, check.input_rel);
    json slices = json::array();
    for (const auto& sl : report.slices)
      slices.push_back({{"name", sl.name}, {"max_rel_error", sl.max_rel_error}, {"checked", sl.checked}});
    runs.push_back({{"seed", seed},
                    {"max_rel_error", err},
                    {"param_rel_error", check.param_rel},
                    {"input_rel_error", check.input_rel},
                    {"worst_slice", report.worst_slice},
                    {"worst_index", report.worst_index},
                    {"checked", report.checked},
                    {"slices", slices}});
    worst = std::max(worst, err);
    std::printf("seed %llu: max relative error %.3e (params %.3e, worst %s; input %.3e)\n",
                static_cast<unsigned long long>(seed), err, check.param_rel, report.worst_slice.c_str(),
                check.input_rel);
  }
  const bool pass = worst < threshold;
  write_json(c.out, {{"voxels", n},
                     {"channels", channels},
                     {"heads", heads},
                     {"M", m},
                     {"D", d},
                     {"threshold", threshold},
                     {"max_rel_error", worst},
                     {"pass", pass},
                     {"runs", runs}});
  std::printf("%s: max relative error %.3e (threshold %.1e)\n", pass ? "PASS" : "FAIL", worst, threshold);
  return pass ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Codebook-based sparse voxel attention: data, patterns, training and diagnostics"};
  app.require_subcommand(1);

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "procedural labeled scenes");
  synth_cmd->require_subcommand(1);
  const auto add_densities = [](CLI::App* sub, DataConfig& d) {
    sub->add_option("--surface-density", d.surface_density, "points per m^2 on floors and walls");
    sub->add_option("--line-density", d.line_density, "points per m along edges");
    sub->add_option("--volume-density", d.volume_density, "points per m^3 in scatter boxes");
  };
  Common sg;
  std::string spec_path;
  DataConfig sdata;
  auto* sgen = synth_cmd->add_subcommand("generate", "one scene (.ply or .csv)");
  add_common(sgen, sg);
  sgen->add_option("--spec", spec_path, "scene spec JSON; default draws a random scene from --seed");
  sgen->add_option("--falloff", sdata.falloff, "density falloff per meter");
  sgen->add_option("--noise", sdata.noise, "Gaussian jitter sigma (m)");
  sgen->add_option("--voxel-size", sdata.voxel_size, "voxel size used to place primitives");
  sgen->add_option("--half-extent", sdata.half_extent, "floor half width (m)");
  add_densities(sgen, sdata);

  Common sc;
  DataConfig cdata;
  auto* scorpus = synth_cmd->add_subcommand("corpus", "train/val scene set with corpus.json manifest");
  add_common(scorpus, sc);
  scorpus->add_option("--scenes", cdata.scenes, "number of scenes");
  scorpus->add_option("--split", cdata.split, "training fraction");
  scorpus->add_option("--falloff", cdata.falloff, "density falloff per meter");
  scorpus->add_option("--noise", cdata.noise, "Gaussian jitter sigma (m)");
  scorpus->add_option("--voxel-size", cdata.voxel_size, "voxel size used to place primitives");
  scorpus->add_option("--half-extent", cdata.half_extent, "floor half width (m)");
  add_densities(scorpus, cdata);

  // patterns
  auto* pat = app.add_subcommand("patterns", "occupancy patterns and region codebooks");
  pat->require_subcommand(1);
  Common pc;
  std::vector<std::string> p_inputs;
  double p_voxel = 0.15;
  int p_stride = 1, p_dilation = 1, p_m = 8, p_d = 3, p_restarts = 10, p_mmin = 1, p_mmax = 12;
  std::size_t p_samples = 4000, p_scene_count = 10;
  double p_threshold = 0.1;
  std::vector<int> p_strides{1, 2};
  auto add_inputs = [&](CLI::App* sub) {
    add_common(sub, pc);
    sub->add_option("--input", p_inputs, "scene files, corpus directories or a mask JSON")->required();
    sub->add_option("--voxel-size", p_voxel, "voxel size");
    sub->add_option("--samples", p_samples, "masks sampled per (stride, dilation); 0 keeps all");
  };
  auto* pcollect = pat->add_subcommand("collect", "occupancy masks of every voxel");
  add_inputs(pcollect);
  pcollect->add_option("--stride", p_stride, "downsampling stride (power of two)");
  pcollect->add_option("--dilation", p_dilation, "neighborhood dilation");
  auto* pcluster = pat->add_subcommand("cluster", "K-modes over masks");
  add_inputs(pcluster);
  pcluster->add_option("--stride", p_stride, "downsampling stride");
  pcluster->add_option("--dilation", p_dilation, "neighborhood dilation");
  pcluster->add_option("--m", p_m, "number of clusters")->required();
  pcluster->add_option("--restarts", p_restarts, "seeded restarts");
  auto* pelbow = pat->add_subcommand("elbow", "cost curve and saturation point");
  add_inputs(pelbow);
  pelbow->add_option("--stride", p_stride, "downsampling stride");
  pelbow->add_option("--dilation", p_dilation, "neighborhood dilation");
  pelbow->add_option("--m-min", p_mmin, "smallest M");
  pelbow->add_option("--m-max", p_mmax, "largest M");
  pelbow->add_option("--threshold", p_threshold, "relative cost drop treated as flat");
  pelbow->add_option("--restarts", p_restarts, "seeded restarts");
  auto* pbuild = pat->add_subcommand("build", "region codebook JSON");
  add_inputs(pbuild);
  pbuild->add_option("--m", p_m, "shapes per dilation");
  pbuild->add_option("--d", p_d, "dilations 1..D");
  pbuild->add_option("--strides", p_strides, "strides to cover")->delimiter(',');
  pbuild->add_option("--scene-count", p_scene_count, "scenes drawn for mining");
  pbuild->add_option("--restarts", p_restarts, "seeded restarts");

  // train / eval
  Common tc;
  std::string t_config;
  std::vector<std::string> t_sets;
  auto* train_cmd = app.add_subcommand("train", "train a model; writes checkpoint.bin and report.json");
  add_common(train_cmd, tc);
  train_cmd->add_option("--config", t_config, "run config JSON");
  train_cmd->add_option("--set", t_sets, "override, e.g. model.kind=conv");

  Common ec;
  std::string e_ckpt, e_config, e_split = "val";
  std::vector<std::string> e_sets, e_scenes;
  auto* eval_cmd = app.add_subcommand("eval", "IoU report for a checkpoint");
  add_common(eval_cmd, ec);
  eval_cmd->add_option("--checkpoint", e_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--config", e_config, "run config naming the data");
  eval_cmd->add_option("--set", e_sets, "config override");
  eval_cmd->add_option("--split", e_split, "train, val or all");
  eval_cmd->add_option("--scenes", e_scenes, "explicit scene files instead of the config data");

  // gradcheck
  Common gc;
  int g_n = 20, g_c = 8, g_h = 2, g_m = 2, g_d = 2, g_seeds = 1;
  double g_threshold = 1e-4;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of one block");
  add_common(grad_cmd, gc);
  grad_cmd->add_option("--voxels", g_n, "voxels");
  grad_cmd->add_option("--channels", g_c, "channels");
  grad_cmd->add_option("--heads", g_h, "heads");
  grad_cmd->add_option("--m", g_m, "shapes");
  grad_cmd->add_option("--d", g_d, "dilations");
  grad_cmd->add_option("--seeds", g_seeds, "consecutive seeds starting at --seed");
  grad_cmd->add_option("--threshold", g_threshold, "maximum relative error");

  // diagnose
  auto* diag_cmd = app.add_subcommand("diagnose", "analysis exports");
  diag_cmd->require_subcommand(1);
  Common dc;
  std::string d_ckpt, d_config, d_split = "all", d_compare = "vanilla", d_config_b, d_axis = "both";
  std::vector<std::string> d_sets;
  std::vector<std::size_t> d_sizes;
  long d_layer = -1;
  std::size_t d_scene = 0;
  auto* dent = diag_cmd->add_subcommand("entropy", "per-layer normalised choice entropy (CSV)");
  add_common(dent, dc);
  dent->add_option("--checkpoint", d_ckpt, "checkpoint file")->required();
  dent->add_option("--config", d_config, "run config naming the data");
  dent->add_option("--set", d_sets, "config override");
  dent->add_option("--split", d_split, "train, val or all");
  auto* dchoice = diag_cmd->add_subcommand("choices", "shape/dilation choice maps (PLY + CSV) and statistics");
  add_common(dchoice, dc);
  dchoice->add_option("--checkpoint", d_ckpt, "checkpoint file")->required();
  dchoice->add_option("--config", d_config, "run config naming the data");
  dchoice->add_option("--set", d_sets, "config override");
  dchoice->add_option("--split", d_split, "scenes used for the statistics");
  dchoice->add_option("--scene", d_scene, "index of the exported scene within the split");
  dchoice->add_option("--layer", d_layer, "block index (default: last stride-1 block)");
  dchoice->add_option("--axis", d_axis, "shape, dilation or both");
  auto* dgap = diag_cmd->add_subcommand("gap", "train/val accuracy curves of two configs (CSV)");
  add_common(dgap, dc);
  dgap->add_option("--config", d_config, "reference run config");
  dgap->add_option("--set", d_sets, "override applied to the reference");
  dgap->add_option("--compare", d_compare, "block kind for the second config (width-matched)");
  dgap->add_option("--config-b", d_config_b, "explicit second run config instead of --compare");
  dgap->add_option("--sizes", d_sizes, "corpus sizes")->delimiter(',');
  auto* drs = diag_cmd->add_subcommand("rs-baseline", "learned vs frozen random codebook choice");
  add_common(drs, dc);
  drs->add_option("--config", d_config, "learned run config");
  drs->add_option("--set", d_sets, "config override");

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "throughput (JSON)");
  bench_cmd->require_subcommand(1);
  Common bc;
  std::size_t b_voxels = 50000;
  int b_repeats = 3;
  auto* bgather = bench_cmd->add_subcommand("gather", "neighbor resolution");
  add_common(bgather, bc, false);
  bgather->add_option("--voxels", b_voxels, "grid size");
  bgather->add_option("--repeats", b_repeats, "timed repetitions (best is reported)");
  auto* bblock = bench_cmd->add_subcommand("block", "coded block forward");
  add_common(bblock, bc, false);
  bblock->add_option("--voxels", b_voxels, "grid size");
  bblock->add_option("--repeats", b_repeats, "timed repetitions (best is reported)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    for (const Common* c : {&sg, &sc, &pc, &tc, &ec, &gc, &dc, &bc})
      if (c->threads > 0) par::set_threads(c->threads);

    if (sgen->parsed()) {
      synth::SceneSpec spec;
      if (!spec_path.empty()) {
        const json j = json::parse(io::read_text(spec_path), nullptr, false);
        if (j.is_discarded()) throw ValidationError(spec_path + ": not valid JSON");
        spec = synth::SceneSpec::from_json(j);
        if (sg.seed) spec.seed = *sg.seed;
      } else {
        spec = synth::random_scene(sg.seed.value_or(0), corpus_options(sdata));
      }
      const PointCloud cloud = synth::generate(spec);
      io::write_scene(sg.out, cloud);
      std::printf("%zu points from %zu primitives -> %s\n", cloud.size(), spec.primitives.size(), sg.out.c_str());
      return 0;
    }
    if (scorpus->parsed()) {
      cdata.seed = sc.seed.value_or(0);
      const synth::Corpus corpus = synth::make_corpus(corpus_options(cdata));
      for (const auto& w : corpus.warnings) std::cerr << "warning: " << w << "\n";
      write_corpus(sc.out, corpus);
      std::printf("%zu train / %zu val scenes -> %s\n", corpus.train.size(), corpus.val.size(), sc.out.c_str());
      return 0;
    }

    if (pcollect->parsed() || pcluster->parsed() || pelbow->parsed()) {
      const std::uint64_t seed = pc.seed.value_or(0);
      const auto masks = load_masks(p_inputs, p_voxel, p_stride, p_dilation, p_samples, seed);
      patterns::KModesOptions km;
      km.restarts = p_restarts;
      km.seed = seed;
      if (pcollect->parsed()) {
        json list = json::array();
        for (auto m : masks) list.push_back(patterns::mask_to_bits(m));
        write_json(pc.out, {{"stride", p_stride}, {"dilation", p_dilation}, {"count", masks.size()}, {"masks", list}});
        std::printf("%zu masks -> %s\n", masks.size(), pc.out.c_str());
      } else if (pcluster->parsed()) {
        const auto r = patterns::kmodes(masks, p_m, km);
        json centroids = json::array();
        for (auto m : r.centroids) centroids.push_back(patterns::mask_to_bits(m));
        std::vector<std::int64_t> sizes(r.centroids.size(), 0);
        for (int a : r.assignment) ++sizes[static_cast<std::size_t>(a)];
        write_json(pc.out, {{"M", p_m},
                            {"masks", masks.size()},
                            {"cost", r.cost},
                            {"iterations", r.iterations},
                            {"restart", r.restart},
                            {"centroids", centroids},
                            {"cluster_sizes", sizes}});
        std::printf("M=%d cost %lld: %s\n", p_m, static_cast<long long>(r.cost), bits_list(r.centroids).c_str());
      } else {
        const auto e = patterns::elbow_select(masks, p_mmin, p_mmax, p_threshold, km);
        write_json(pc.out, {{"best", e.best},
                            {"saturated", e.saturated},
                            {"threshold", p_threshold},
                            {"m", e.m_values},
                            {"cost", e.costs}});
        std::printf("saturation at M=%d%s\n", e.best, e.saturated ? "" : " (curve never flattened; range maximum)");
      }
      return 0;
    }
    if (pbuild->parsed()) {
      const auto grids = load_grids(p_inputs, p_voxel);
      patterns::BuildOptions opt;
      opt.scene_count = p_scene_count;
      opt.sample_count = p_samples;
      opt.restarts = p_restarts;
      opt.seed = pc.seed.value_or(0);
      const auto cb = patterns::build_region_codebook(grids, p_d, p_m, p_strides, opt);
      io::write_text(pc.out, cb.dump());
      std::printf("%d x %d regions for %zu strides -> %s\n", p_m, p_d, p_strides.size(), pc.out.c_str());
      return 0;
    }

    if (train_cmd->parsed()) {
      const RunConfig cfg = run_config(t_config, t_sets, tc);
      const Dataset data = load_dataset(cfg.data);
      for (const auto& w : data.warnings) std::cerr << "warning: " << w << "\n";
      train_run(cfg, data, ensure_dir(tc.out), "");
      return 0;
    }
    if (eval_cmd->parsed()) {
      const LoadedCheckpoint ck = load_checkpoint(e_ckpt);
      std::vector<PreparedScene> scenes;
      if (!e_scenes.empty()) {
        const RunConfig cfg = run_config(e_config, e_sets, ec);
        std::vector<SparseVoxelGrid> grids;
        for (const auto& f : e_scenes) grids.push_back(voxelize(io::read_scene(f), cfg.data.voxel_size));
        scenes = prepare_scenes(grids, ck.model.config());
      } else {
        const RunConfig cfg = run_config(e_config, e_sets, ec);
        scenes = scenes_for(ck.model, load_dataset(cfg.data), e_split);
      }
      const EvalReport r = evaluate(ck.model, scenes);
      write_json(ec.out, r.to_json());
      std::printf("accuracy %.4f  mIoU %.4f over %zu voxels\n", r.accuracy, r.mean_iou, r.voxels);
      return 0;
    }
    if (grad_cmd->parsed()) return run_gradcheck(gc, g_n, g_c, g_h, g_m, g_d, g_seeds, g_threshold);

    if (dent->parsed() || dchoice->parsed()) {
      const LoadedCheckpoint ck = load_checkpoint(d_ckpt);
      const RunConfig cfg = run_config(d_config, d_sets, dc);
      const Dataset data = load_dataset(cfg.data);
      const auto scenes = scenes_for(ck.model, data, d_split);
      if (dent->parsed()) {
        const auto rows = diag::layer_entropy_profile(ck.model, scenes);
        io::write_text(dc.out, diag::entropy_csv(rows));
        for (const auto& r : rows)
          std::printf("layer %d (stage %d): entropy %.4f  w_f %.4f  f_p %.4f\n", r.layer, r.stage, r.entropy,
                      r.entropy_wf, r.entropy_fp);
        return 0;
      }
      const std::size_t layer =
          d_layer < 0 ? diag::default_choice_layer(ck.model) : static_cast<std::size_t>(d_layer);
      if (d_scene >= scenes.size()) throw ValidationError("--scene index out of range");
      const auto ex = diag::choice_export(ck.model, scenes[d_scene], layer);
      const fs::path prefix(dc.out);
      if (!prefix.parent_path().empty()) fs::create_directories(prefix.parent_path());
      for (auto axis : {diag::ChoiceAxis::shape, diag::ChoiceAxis::dilation}) {
        const std::string name = axis == diag::ChoiceAxis::shape ? "shape" : "dilation";
        if (d_axis != "both" && d_axis != name) continue;
        const auto& values = axis == diag::ChoiceAxis::shape ? ex.shape : ex.dilation;
        io::write_scalar_ply(dc.out + "_" + name + ".ply", ex.positions, "choice", values);
        io::write_text(dc.out + "_" + name + ".csv", diag::choice_csv(ex, axis));
      }
      if (d_axis != "both" && d_axis != "shape" && d_axis != "dilation")
        throw ValidationError("--axis must be shape, dilation or both");
      const auto stats = diag::geometric_adaptation(ck.model, scenes, layer);
      json j = stats.to_json();
      j["layer"] = layer;
      write_json(dc.out + "_stats.json", j);
      std::printf("layer %zu: floor-interior modal shape %d (%s), modal dilation low/high density %d/%d\n", layer,
                  stats.floor_modal_shape, stats.floor_modal_is_plane ? "plane" : "not a plane",
                  stats.low_modal_dilation + 1, stats.high_modal_dilation + 1);
      return 0;
    }
    if (dgap->parsed()) {
      RunConfig a = run_config(d_config, d_sets, dc);
      RunConfig b = a;
      std::string name_a = to_string(a.model.kind), name_b;
      if (!d_config_b.empty()) {
        b = run_config(d_config_b, {}, dc);
        name_b = to_string(b.model.kind);
      } else {
        b.model = diag::match_parameters(a.model, block_kind_from_string(d_compare));
        name_b = to_string(b.model.kind);
      }
      if (name_a == name_b) {
        name_a += "-a";
        name_b += "-b";
      }
      diag::require_matched_parameters(a.model, b.model);
      if (d_sizes.empty()) d_sizes.push_back(a.data.scenes);
      std::vector<diag::GapRow> rows;
      const fs::path dir = fs::path(dc.out).parent_path();
      for (std::size_t size : d_sizes) {
        for (auto* cfg : {&a, &b}) {
          RunConfig run = *cfg;
          run.data.scenes = std::max<std::size_t>(size, 2);
          const Dataset data = load_dataset(run.data);
          const std::string name = cfg == &a ? name_a : name_b;
          const auto sub = dir / ("gap_" + name + "_" + std::to_string(size));
          const auto trained = train_run(run, data, sub.string(), "[" + name + " n=" + std::to_string(size) + "] ");
          const auto part = diag::gap_rows(name, size, trained.report);
          rows.insert(rows.end(), part.begin(), part.end());
        }
      }
      io::write_text(dc.out, diag::gap_csv(rows));
      return 0;
    }
    if (drs->parsed()) {
      const RunConfig learned = run_config(d_config, d_sets, dc);
      const RunConfig rs = diag::random_codebook_config(learned);
      const Dataset data = load_dataset(learned.data);
      const fs::path dir = ensure_dir(dc.out);
      const auto a = train_run(learned, data, (dir / "learned").string(), "[learned] ");
      const auto b = train_run(rs, data, (dir / "random").string(), "[random] ");
      auto final_val = [](const TrainReport& r) {
        return r.epochs.empty() || !r.epochs.back().has_val ? 0.0 : r.epochs.back().val.accuracy;
      };
      const json summary{{"learned_val_acc", final_val(a.report)},
                         {"random_val_acc", final_val(b.report)},
                         {"learned_params", a.model->store().trainable_size()},
                         {"random_params", b.model->store().trainable_size()},
                         {"learned_at_least_random", final_val(a.report) >= final_val(b.report)}};
      write_json((dir / "summary.json").string(), summary);
      std::printf("val accuracy learned %.4f vs random %.4f\n", final_val(a.report), final_val(b.report));
      return 0;
    }

    if (bgather->parsed() || bblock->parsed()) {
      const auto j = bgather->parsed() ? bench::gather(b_voxels, b_repeats, bc.seed.value_or(0))
                                       : bench::block(b_voxels, b_repeats, bc.seed.value_or(0));
      if (!bc.out.empty()) write_json(bc.out, j);
      std::printf("%s\n", j.dump().c_str());
      return 0;
    }
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
