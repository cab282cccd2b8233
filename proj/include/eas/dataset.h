#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "eas/partition.h"
#include "eas/tensor.h"

namespace eas {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One split of a labelled image set, stored NCHW in a flat buffer.
struct Split {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return channels * height * width; }
  /// Stacks the selected samples into [n, C, H, W].
  TensorF batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
  /// Indices of samples whose label is in `classes`, in storage order.
  std::vector<std::size_t> indices_of(std::span<const int> classes) const;
};

struct SplitFractions {
  double train = 2.0 / 3.0;
  double val = 1.0 / 6.0;  // test takes the remainder
};

struct Dataset {
  std::vector<std::string> class_names;
  Split train, val, test;
  std::uint64_t seed = 0;
  nlohmann::json source;  // how the data was produced

  int num_classes() const { return static_cast<int>(class_names.size()); }
  /// Throws PartitionError when the partition does not match these classes.
  void check_partition(const SuperclassPartition& partition) const;
};

/// Hierarchical Gaussian prototypes. Classes are grouped contiguously into
/// `superclasses`; each group owns a smooth low-frequency prototype and every
/// class adds its own mid-frequency pattern scaled by `class_scale`. Samples
/// are the circularly shifted signal with a random gain, plus white noise.
struct SyntheticSpec {
  int classes = 12;
  int superclasses = 4;
  int samples_per_class = 300;
  SplitFractions fractions{};
  int channels = 3;
  int height = 32;
  int width = 32;
  double class_scale = 0.6;
  double noise = 0.8;
  int max_shift = 2;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static SyntheticSpec from_json(const nlohmann::json& j);
};

Dataset make_synthetic(const SyntheticSpec& spec);

/// Reads `root/<class>/*.ppm|*.pgm` (binary P6/P5, 8-bit). Classes are the
/// subfolder names in sorted order; every image must share one size. Pixels
/// are scaled to [0,1] and standardised per channel with train-split
/// statistics. Each class is shuffled with `seed` and split by `fractions`.
Dataset load_image_directory(const std::filesystem::path& root, SplitFractions fractions, std::uint64_t seed);

}  // namespace eas
