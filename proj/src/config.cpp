#include "codedvtr/config.hpp"

#include <set>

#include "codedvtr/error.hpp"
#include "codedvtr/scene_io.hpp"

namespace cvtr {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be an object");
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ValidationError("unknown " + where + " field '" + key + "'");
}

}  // namespace

nlohmann::json adam_to_json(const AdamConfig& c) {
  return {{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay}};
}

AdamConfig adam_from_json(const nlohmann::json& j) {
  reject_unknown(j, {"lr", "beta1", "beta2", "eps", "weight_decay"}, "optimizer");
  AdamConfig c;
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (!(c.lr >= 0.0) || !(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0) || !(c.eps > 0.0) ||
      !(c.weight_decay >= 0.0))
    throw ValidationError("optimizer hyperparameters out of range");
  return c;
}

nlohmann::json RunConfig::to_json() const {
  return {{"seed", seed},
          {"model", model.to_json()},
          {"optimizer", adam_to_json(optimizer)},
          {"train", train.to_json()},
          {"data",
           {{"scenes", data.scenes},
            {"split", data.split},
            {"seed", data.seed},
            {"voxel_size", data.voxel_size},
            {"half_extent", data.half_extent},
            {"falloff", data.falloff},
            {"surface_density", data.surface_density},
            {"line_density", data.line_density},
            {"volume_density", data.volume_density},
            {"noise", data.noise},
            {"scene_dir", data.scene_dir}}},
          {"codebook",
           {{"path", codebook.path},
            {"scenes", codebook.scenes},
            {"samples", codebook.samples},
            {"restarts", codebook.restarts}}}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j, {"seed", "model", "optimizer", "train", "data", "codebook"}, "run config");
  RunConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("model")) c.model = ModelConfig::from_json(j["model"]);
    if (j.contains("optimizer")) c.optimizer = adam_from_json(j["optimizer"]);
    if (j.contains("train")) c.train = TrainConfig::from_json(j["train"]);
    if (j.contains("data")) {
      const auto& d = j["data"];
      reject_unknown(d,
                     {"scenes", "split", "seed", "voxel_size", "half_extent", "falloff", "surface_density",
                      "line_density", "volume_density", "noise", "scene_dir"},
                     "data");
      c.data.scenes = d.value("scenes", c.data.scenes);
      c.data.split = d.value("split", c.data.split);
      c.data.seed = d.value("seed", c.data.seed);
      c.data.voxel_size = d.value("voxel_size", c.data.voxel_size);
      c.data.half_extent = d.value("half_extent", c.data.half_extent);
      c.data.falloff = d.value("falloff", c.data.falloff);
      c.data.surface_density = d.value("surface_density", c.data.surface_density);
      c.data.line_density = d.value("line_density", c.data.line_density);
      c.data.volume_density = d.value("volume_density", c.data.volume_density);
      c.data.noise = d.value("noise", c.data.noise);
      c.data.scene_dir = d.value("scene_dir", c.data.scene_dir);
    }
    if (j.contains("codebook")) {
      const auto& b = j["codebook"];
      reject_unknown(b, {"path", "scenes", "samples", "restarts"}, "codebook");
      c.codebook.path = b.value("path", c.codebook.path);
      c.codebook.scenes = b.value("scenes", c.codebook.scenes);
      c.codebook.samples = b.value("samples", c.codebook.samples);
      c.codebook.restarts = b.value("restarts", c.codebook.restarts);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("run config: ") + e.what());
  }
  if (!(c.data.voxel_size > 0.0)) throw ValidationError("data.voxel_size must be > 0");
  if (c.codebook.restarts < 1) throw ValidationError("codebook.restarts must be >= 1");
  return c;
}

void apply_override(nlohmann::json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  nlohmann::json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ValidationError("override path '" + path + "' has an empty component");
    if (!node->is_object()) *node = nlohmann::json::object();
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  nlohmann::json j = nlohmann::json::object();
  if (!path.empty()) {
    j = nlohmann::json::parse(io::read_text(path), nullptr, false);
    if (j.is_discarded()) throw ValidationError(path + ": not valid JSON");
  }
  for (const auto& o : overrides) apply_override(j, o);
  return RunConfig::from_json(j);
}

}  // namespace cvtr
