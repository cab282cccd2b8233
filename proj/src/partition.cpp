#include "eas/partition.h"

#include <fstream>

namespace eas {

int SuperclassPartition::num_classes() const {
  int n = 0;
  for (const auto& s : superclasses) n += static_cast<int>(s.classes.size());
  return n;
}

const std::vector<int>& SuperclassPartition::classes(int t) const {
  if (t < 0 || t >= size())
    throw PartitionError("unknown superclass " + std::to_string(t) + " (partition has " +
                         std::to_string(size()) + ")");
  return superclasses[static_cast<std::size_t>(t)].classes;
}

void SuperclassPartition::validate(int classes) const {
  if (superclasses.empty()) throw PartitionError("partition has no superclasses");
  std::vector<int> owner(static_cast<std::size_t>(std::max(classes, 0)), -1);
  for (int t = 0; t < size(); ++t) {
    const auto& s = superclasses[static_cast<std::size_t>(t)];
    if (s.classes.empty()) throw PartitionError("superclass '" + s.name + "' is empty");
    for (int c : s.classes) {
      if (c < 0 || c >= classes)
        throw PartitionError("superclass '" + s.name + "' references class " + std::to_string(c) +
                             " but the dataset has " + std::to_string(classes) + " classes");
      auto& o = owner[static_cast<std::size_t>(c)];
      if (o >= 0)
        throw PartitionError("class " + std::to_string(c) + " appears in both '" +
                             superclasses[static_cast<std::size_t>(o)].name + "' and '" + s.name + "'");
      o = t;
    }
  }
  for (int c = 0; c < classes; ++c)
    if (owner[static_cast<std::size_t>(c)] < 0)
      throw PartitionError("class " + std::to_string(c) + " belongs to no superclass");
}

std::vector<int> SuperclassPartition::class_to_superclass() const {
  const int n = num_classes();
  validate(n);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (int t = 0; t < size(); ++t)
    for (int c : superclasses[static_cast<std::size_t>(t)].classes) out[static_cast<std::size_t>(c)] = t;
  return out;
}

SuperclassPartition SuperclassPartition::contiguous(int num_classes, int groups) {
  if (groups <= 0 || num_classes < groups)
    throw PartitionError("cannot split " + std::to_string(num_classes) + " classes into " +
                         std::to_string(groups) + " superclasses");
  SuperclassPartition p;
  for (int t = 0; t < groups; ++t) {
    Superclass s{"s" + std::to_string(t), {}};
    for (int c = t * num_classes / groups; c < (t + 1) * num_classes / groups; ++c) s.classes.push_back(c);
    p.superclasses.push_back(std::move(s));
  }
  return p;
}

nlohmann::json SuperclassPartition::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : superclasses) arr.push_back({{"name", s.name}, {"classes", s.classes}});
  return {{"superclasses", arr}};
}

SuperclassPartition SuperclassPartition::from_json(const nlohmann::json& j) {
  try {
    SuperclassPartition p;
    for (const auto& s : j.at("superclasses"))
      p.superclasses.push_back({s.at("name").get<std::string>(), s.at("classes").get<std::vector<int>>()});
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw PartitionError(std::string("malformed partition JSON: ") + e.what());
  }
}

SuperclassPartition SuperclassPartition::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw PartitionError("cannot open partition file " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw PartitionError(path.string() + ": " + e.what());
  }
}

void SuperclassPartition::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw PartitionError("cannot write partition file " + path.string());
  out << to_json().dump(2) << '\n';
}

}  // namespace eas
