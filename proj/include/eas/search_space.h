#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace eas {

class SpaceError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct UnitConfig {
  int max_blocks = 4;
  int min_blocks = 2;
  int output_channels = 16;
  int stride = 1;  // applied at the unit's first block
};

struct StemConfig {
  int channels = 16;
  int kernel = 3;
  int stride = 1;
};

struct HeadConfig {
  int hidden = 128;
  int classes = 12;
};

/// Which gates of a unit are which. Indices point into the flat gate vector.
/// Each choice dimension is a thermometer code: gate j set means "at least
/// choice j+1", so a valid encoding sets a prefix of each group.
struct BlockGates {
  std::vector<int> kernel;
  std::vector<int> expand;
};

struct UnitGates {
  std::vector<int> depth;
  std::vector<BlockGates> blocks;
};

/// Elastic search space: units of inverted-residual blocks with elastic
/// depth, expansion ratio and depthwise kernel size.
struct SearchSpace {
  std::vector<UnitConfig> units;
  std::vector<int> depth_choices{2, 3, 4};
  std::vector<int> expand_choices{3, 4, 6};
  std::vector<int> kernel_choices{3, 5, 7};
  StemConfig stem;
  HeadConfig head;
  int input_height = 32;
  int input_width = 32;
  int input_channels = 3;

  /// 5 units, channels (16, 24, 40, 80, 96), strides (1, 2, 2, 2, 1), 32x32x3.
  static SearchSpace default_space(int classes = 12);

  void validate() const;

  int max_kernel() const { return kernel_choices.back(); }
  int max_expand() const { return expand_choices.back(); }
  int unit_input_channels(std::size_t unit) const;
  /// Channels entering block `block` of `unit`.
  int block_input_channels(std::size_t unit, std::size_t block) const;
  int block_stride(std::size_t unit, std::size_t block) const;
  /// Spatial size of the feature map entering `unit`.
  std::pair<int, int> unit_input_size(std::size_t unit) const;
  bool block_has_residual(std::size_t unit, std::size_t block) const;

  int gate_count() const;
  std::vector<UnitGates> gate_layout() const;
  /// Every thermometer group (depth per unit, kernel and expand per block).
  std::vector<std::vector<int>> gate_groups() const;
  /// Gate index that switches block (unit, block) on, or -1 if it is always on.
  int block_active_gate(std::size_t unit, std::size_t block) const;

  nlohmann::json to_json() const;
  static SearchSpace from_json(const nlohmann::json& j);
  /// FNV-1a of the canonical JSON form.
  std::uint64_t hash() const;

  bool operator==(const SearchSpace& other) const { return to_json() == other.to_json(); }
};

/// Single-path gate vector (values 0/1) in the layout of SearchSpace::gate_layout.
struct ArchEncoding {
  std::vector<std::uint8_t> gates;

  bool operator==(const ArchEncoding&) const = default;
};

struct BlockArch {
  int kernel = 3;
  int expand = 3;
  bool operator==(const BlockArch&) const = default;
};

struct UnitArch {
  int depth = 2;
  std::vector<BlockArch> blocks;  // exactly `depth` entries
  bool operator==(const UnitArch&) const = default;
};

struct DiscreteArch {
  std::vector<UnitArch> units;

  bool operator==(const DiscreteArch&) const = default;
  nlohmann::json to_json() const;
  static DiscreteArch from_json(const nlohmann::json& j);
  /// Compact stable key, e.g. "3:7/6,5/4,3/3|2:...".
  std::string key() const;
};

/// Enforces nesting by prefix conjunction within every thermometer group.
ArchEncoding normalize(const std::vector<std::uint8_t>& raw, const SearchSpace& space);
bool is_normalized(const ArchEncoding& enc, const SearchSpace& space);

DiscreteArch to_discrete(const ArchEncoding& enc, const SearchSpace& space);
/// Gates of inactive blocks are zero in the result.
ArchEncoding from_discrete(const DiscreteArch& arch, const SearchSpace& space);
void validate_arch(const DiscreteArch& arch, const SearchSpace& space);

DiscreteArch minimal_arch(const SearchSpace& space);
DiscreteArch largest_arch(const SearchSpace& space);

/// One-hot form: per unit a depth one-hot, then per block slot a kernel
/// one-hot and an expand one-hot (all zero for inactive blocks).
std::vector<std::uint8_t> one_hot(const DiscreteArch& arch, const SearchSpace& space);
double cosine_similarity(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b);
double arch_cosine(const DiscreteArch& a, const DiscreteArch& b, const SearchSpace& space);

using ArchCount = unsigned __int128;
ArchCount count_architectures(const SearchSpace& space);
std::string to_string(ArchCount v);

/// Visits every legal architecture once, in a fixed order. Throws SpaceError
/// if the space holds more than `limit` architectures.
void enumerate(const SearchSpace& space, std::uint64_t limit,
               const std::function<void(const DiscreteArch&)>& visit);
std::vector<DiscreteArch> enumerate_all(const SearchSpace& space, std::uint64_t limit);

}  // namespace eas
