#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace eas {

class PartitionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Superclass {
  std::string name;
  std::vector<int> classes;  // 0-based class indices

  friend bool operator==(const Superclass&, const Superclass&) = default;
};

/// Disjoint groups of class indices covering every class exactly once.
/// JSON: {"superclasses":[{"name":"...","classes":[ints]}, ...]}
struct SuperclassPartition {
  std::vector<Superclass> superclasses;

  int size() const { return static_cast<int>(superclasses.size()); }
  int num_classes() const;
  const std::vector<int>& classes(int t) const;

  /// Throws PartitionError unless the groups are non-empty, pairwise disjoint
  /// and together cover exactly {0, ..., num_classes - 1}.
  void validate(int num_classes) const;
  /// superclass index of every class; requires a valid partition.
  std::vector<int> class_to_superclass() const;

  /// `groups` consecutive blocks of classes, named "s0", "s1", ...
  static SuperclassPartition contiguous(int num_classes, int groups);

  nlohmann::json to_json() const;
  static SuperclassPartition from_json(const nlohmann::json& j);
  static SuperclassPartition load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  friend bool operator==(const SuperclassPartition&, const SuperclassPartition&) = default;
};

}  // namespace eas
