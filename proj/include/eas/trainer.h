#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "eas/dataset.h"
#include "eas/partition.h"
#include "eas/rng.h"
#include "eas/supernet.h"

namespace eas {

/// Superclass dropout: every non-target group of logits is removed from the
/// softmax with probability q, independently per sample and per group.
struct DropoutConfig {
  double q = 0.0;
  /// When false the mask stream is never touched and every mask is all ones.
  bool enabled = true;

  void validate() const;
};

/// Keep-mask [targets.size(), num_classes] with entries 0 or 1. Target groups
/// are always kept. One uniform is drawn for every (sample, group) pair,
/// target groups included, so the stream position does not depend on q.
TensorF sample_mask(const SuperclassPartition& partition, std::span<const int> targets, double q, Rng& rng);

struct TrainPhase {
  std::string name;
  ElasticDims dims;
  int epochs = 0;
};

struct TrainSchedule {
  std::vector<TrainPhase> phases;
  std::size_t batch_size = 256;
  double lr0 = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  bool distill = false;
  double distill_weight = 1.0;
  /// Samples per superclass used for the per-epoch validation metric.
  std::size_t eval_per_superclass = 64;

  /// Four phases sharing `total_epochs` (largest only, then +kernel, +depth,
  /// +width). Earlier phases absorb the remainder when it does not divide.
  static TrainSchedule progressive(int total_epochs);
  int total_epochs() const;
  void validate() const;
  nlohmann::json to_json() const;
  static TrainSchedule from_json(const nlohmann::json& j);
};

struct EpochMetrics {
  int epoch = 0;
  std::string phase;
  double loss = 0;
  double lr = 0;
  std::vector<double> superclass_acc;  // largest sub-network, validation subset
};

struct TrainLog {
  std::vector<std::string> superclass_names;
  std::vector<EpochMetrics> epochs;

  std::string csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::filesystem::path checkpoint)
      : std::runtime_error(what), checkpoint_(std::move(checkpoint)) {}
  const std::filesystem::path& checkpoint() const { return checkpoint_; }

 private:
  std::filesystem::path checkpoint_;
};

struct TrainOptions {
  /// Where weights are saved if the loss or a gradient becomes non-finite.
  /// Empty: a file in the system temp directory.
  std::filesystem::path divergence_checkpoint;
  /// Caps steps per epoch (0: a full pass). Used by tests and quick runs.
  std::size_t max_steps_per_epoch = 0;
  std::function<void(const EpochMetrics&)> on_epoch;
};

/// Trains `net` in place on data.train. Randomness comes from child streams
/// of `rng`: data order, architecture sampling and dropout masks each use
/// their own stream, so toggling dropout never shifts the other two.
TrainLog train_supernet(Supernet& net, const Dataset& data, const SuperclassPartition& partition,
                        const TrainSchedule& schedule, const DropoutConfig& dropout, const Rng& rng,
                        const TrainOptions& options = {});

}  // namespace eas
