#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "codedvtr/model.hpp"
#include "codedvtr/optimizer.hpp"

namespace cvtr {

struct TrainConfig {
  int epochs = 30;
  std::size_t batch_size = 2;
  double target_train_acc = 0.0;  // stop once an epoch reaches it; 0 disables
  std::string temperature_schedule = "constant";  // or "cosine"
  double temperature_final = 1.0;                 // cosine end point
  bool shuffle = true;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EvalReport {
  double loss = 0.0;
  double accuracy = 0.0;
  double mean_iou = 0.0;
  std::vector<double> iou;       // per class, NaN when absent from ground truth and predictions
  std::vector<bool> present;     // class occurs in the ground truth
  std::vector<std::vector<std::int64_t>> confusion;  // [truth][prediction]
  std::size_t voxels = 0;

  nlohmann::json to_json() const;
};

struct EpochStats {
  int epoch = 0;
  double temperature = 1.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  bool has_val = false;
  EvalReport val;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  bool stopped_early = false;
  double wall_seconds = 0.0;
  std::string checkpoint;

  nlohmann::json to_json() const;
};

// Per-class IoU from predictions and labels (-1 labels ignored); the mean
// runs over classes present in the ground truth.
EvalReport score(const std::vector<int>& truth, const std::vector<int>& prediction, int classes);

EvalReport evaluate(const Model& model, const std::vector<PreparedScene>& scenes);

double scheduled_temperature(const ModelConfig& model, const TrainConfig& train, int epoch);

// Runs `train.epochs` epochs of AdamW on mean cross-entropy. Gradients of
// a batch are summed scene by scene in batch order. A non-finite loss
// restores the last finite parameters and throws NumericalError.
TrainReport train_model(Model& model, const std::vector<PreparedScene>& train_set,
                        const std::vector<PreparedScene>& val_set, const TrainConfig& train,
                        const AdamConfig& adam, std::uint64_t seed,
                        const std::function<void(const EpochStats&)>& on_epoch = {});

}  // namespace cvtr
