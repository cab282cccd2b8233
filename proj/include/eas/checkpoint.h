#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

#include "eas/graph.h"

namespace eas {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Named float32 tensors plus string metadata.
///
/// On-disk layout (all integers little-endian u32):
///   "EASCKPT\0" | version | n_meta | {klen key vlen value}* |
///   n_tensors | {nlen name rank dims[rank] payload[f32 LE]}*
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::map<std::string, std::string> metadata;
  ParameterMap<float> tensors;

  const std::string& meta(const std::string& key) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

}  // namespace eas
