#include "codedvtr/train.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <set>

#include "codedvtr/error.hpp"
#include "codedvtr/random.hpp"

namespace cvtr {

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"target_train_acc", target_train_acc},
          {"temperature_schedule", temperature_schedule},
          {"temperature_final", temperature_final},
          {"shuffle", shuffle}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"epochs",           "batch_size",        "target_train_acc",
                                           "temperature_schedule", "temperature_final", "shuffle"};
  if (!j.is_object()) throw ValidationError("train config must be an object");
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ValidationError("unknown train field '" + key + "'");
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.target_train_acc = j.value("target_train_acc", c.target_train_acc);
    c.temperature_schedule = j.value("temperature_schedule", c.temperature_schedule);
    c.temperature_final = j.value("temperature_final", c.temperature_final);
    c.shuffle = j.value("shuffle", c.shuffle);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  if (c.epochs < 0) throw ValidationError("epochs must be >= 0");
  if (c.batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (c.temperature_schedule != "constant" && c.temperature_schedule != "cosine")
    throw ValidationError("temperature_schedule must be 'constant' or 'cosine'");
  if (!(c.temperature_final > 0.0)) throw ValidationError("temperature_final must be > 0");
  return c;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < iou.size(); ++c)
    per_class.push_back({{"class", c}, {"iou", number_or_null(iou[c])}, {"present", static_cast<bool>(present[c])}});
  return {{"loss", loss},   {"accuracy", accuracy}, {"mean_iou", mean_iou},
          {"iou", per_class}, {"voxels", voxels},   {"confusion", confusion}};
}

nlohmann::json TrainReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& e : epochs) {
    nlohmann::json row{{"epoch", e.epoch},
                       {"temperature", e.temperature},
                       {"train_loss", number_or_null(e.train_loss)},
                       {"train_acc", e.train_acc}};
    if (e.has_val) {
      row["val_loss"] = e.val.loss;
      row["val_acc"] = e.val.accuracy;
      row["val_mean_iou"] = e.val.mean_iou;
      nlohmann::json iou = nlohmann::json::array();
      for (double v : e.val.iou) iou.push_back(number_or_null(v));
      row["val_iou"] = iou;
    }
    rows.push_back(row);
  }
  nlohmann::json j{{"epochs", rows}, {"stopped_early", stopped_early}};
  if (!checkpoint.empty()) j["checkpoint"] = checkpoint;
  return j;
}

EvalReport score(const std::vector<int>& truth, const std::vector<int>& prediction, int classes) {
  if (truth.size() != prediction.size()) throw StructuralError("score: size mismatch");
  EvalReport r;
  const auto k = static_cast<std::size_t>(classes);
  r.confusion.assign(k, std::vector<std::int64_t>(k, 0));
  for (std::size_t v = 0; v < truth.size(); ++v) {
    if (truth[v] < 0) continue;
    if (truth[v] >= classes || prediction[v] < 0 || prediction[v] >= classes)
      throw ValidationError("score: class id out of range");
    ++r.confusion[truth[v]][prediction[v]];
    ++r.voxels;
  }
  if (r.voxels == 0) throw ValidationError("no labeled voxels to score");
  std::int64_t diagonal = 0;
  r.iou.assign(k, std::numeric_limits<double>::quiet_NaN());
  r.present.assign(k, false);
  double iou_sum = 0.0;
  int present = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::int64_t row = 0, col = 0;
    for (std::size_t o = 0; o < k; ++o) {
      row += r.confusion[c][o];
      col += r.confusion[o][c];
    }
    const std::int64_t tp = r.confusion[c][c];
    diagonal += tp;
    const std::int64_t denom = row + col - tp;
    if (denom > 0) r.iou[c] = static_cast<double>(tp) / static_cast<double>(denom);
    if (row > 0) {
      r.present[c] = true;
      iou_sum += r.iou[c];
      ++present;
    }
  }
  r.accuracy = static_cast<double>(diagonal) / static_cast<double>(r.voxels);
  r.mean_iou = iou_sum / present;
  return r;
}

EvalReport evaluate(const Model& model, const std::vector<PreparedScene>& scenes) {
  std::vector<int> truth, prediction;
  double loss_sum = 0.0;
  for (const auto& scene : scenes) {
    const Matrix logits = model.forward(scene);
    loss_sum += cross_entropy(logits, scene.labels, nullptr).loss_sum;
    const auto p = predict(logits);
    truth.insert(truth.end(), scene.labels.begin(), scene.labels.end());
    prediction.insert(prediction.end(), p.begin(), p.end());
  }
  EvalReport r = score(truth, prediction, model.config().classes);
  r.loss = loss_sum / static_cast<double>(r.voxels);
  return r;
}

double scheduled_temperature(const ModelConfig& model, const TrainConfig& train, int epoch) {
  if (train.temperature_schedule != "cosine" || train.epochs <= 1) return model.temperature;
  const double t = static_cast<double>(epoch) / static_cast<double>(train.epochs - 1);
  return train.temperature_final +
         0.5 * (model.temperature - train.temperature_final) * (1.0 + std::cos(std::numbers::pi * t));
}

TrainReport train_model(Model& model, const std::vector<PreparedScene>& train_set,
                        const std::vector<PreparedScene>& val_set, const TrainConfig& train, const AdamConfig& adam,
                        std::uint64_t seed, const std::function<void(const EpochStats&)>& on_epoch) {
  if (train_set.empty()) throw ValidationError("training set is empty");
  const auto start = std::chrono::steady_clock::now();
  ParamStore& store = model.store();
  OptimizerState opt = make_optimizer(store, adam);
  std::vector<double> last_good(store.all_values().begin(), store.all_values().end());
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  TrainReport report;
  for (int epoch = 0; epoch < train.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    EpochStats stats;
    stats.epoch = epoch;
    stats.temperature = scheduled_temperature(model.config(), train, epoch);
    model.set_temperature(stats.temperature);
    if (train.shuffle) {
      std::mt19937_64 rng(rnd::combine(seed, static_cast<std::uint64_t>(epoch)));
      for (std::size_t i = order.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(rnd::uniform01(rng) * static_cast<double>(i));
        std::swap(order[i - 1], order[j]);
      }
    }

    double loss_sum = 0.0;
    std::size_t labeled = 0, correct = 0;
    for (std::size_t b = 0; b < order.size(); b += train.batch_size) {
      const std::size_t e = std::min(order.size(), b + train.batch_size);
      std::size_t batch_labeled = 0;
      for (std::size_t i = b; i < e; ++i)
        for (int l : train_set[order[i]].labels) batch_labeled += l >= 0;
      if (batch_labeled == 0) continue;
      store.zero_grads();
      double batch_loss = 0.0;
      for (std::size_t i = b; i < e; ++i) {
        const PreparedScene& scene = train_set[order[i]];
        ModelTrace trace;
        const Matrix logits = model.forward(scene, &trace);
        Matrix dlogits;
        const LossResult r = cross_entropy(logits, scene.labels, &dlogits, static_cast<double>(batch_labeled));
        batch_loss += r.loss_sum;
        correct += r.correct;
        if (std::isfinite(r.loss_sum)) model.backward(scene, trace, dlogits);
      }
      if (!std::isfinite(batch_loss)) {
        std::copy(last_good.begin(), last_good.end(), store.all_values().begin());
        throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch));
      }
      std::copy(store.all_values().begin(), store.all_values().end(), last_good.begin());
      loss_sum += batch_loss;
      labeled += batch_labeled;
      adam_step(store, opt);
    }
    stats.train_loss = labeled ? loss_sum / static_cast<double>(labeled) : 0.0;
    stats.train_acc = labeled ? static_cast<double>(correct) / static_cast<double>(labeled) : 0.0;
    if (!val_set.empty()) {
      stats.val = evaluate(model, val_set);
      stats.has_val = true;
    }
    stats.seconds = seconds_since(epoch_start);
    report.epochs.push_back(stats);
    if (on_epoch) on_epoch(stats);
    if (train.target_train_acc > 0.0 && stats.train_acc >= train.target_train_acc) {
      report.stopped_early = true;
      break;
    }
  }
  report.wall_seconds = seconds_since(start);
  return report;
}

}  // namespace cvtr
