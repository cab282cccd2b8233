#include "eas/evaluate.h"

#include <algorithm>

namespace eas {
namespace {

template <typename Score>
double accuracy(const Supernet& net, const DiscreteArch& arch, const Split& split,
                std::span<const std::size_t> indices, std::size_t batch_size, Score&& correct) {
  if (indices.empty()) return 0.0;
  batch_size = std::max<std::size_t>(batch_size, 1);
  std::size_t hits = 0;
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const auto chunk = indices.subspan(start, std::min(batch_size, indices.size() - start));
    const TensorF logits = infer(net, split.batch(chunk), arch);
    const std::size_t classes = logits.dim(1);
    for (std::size_t i = 0; i < chunk.size(); ++i)
      if (correct(logits.data() + i * classes, classes, split.labels[chunk[i]])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(indices.size());
}

}  // namespace

double superclass_accuracy(const Supernet& net, const DiscreteArch& arch, const Split& split,
                           std::span<const std::size_t> indices, std::span<const int> classes,
                           std::size_t batch_size) {
  return accuracy(net, arch, split, indices, batch_size, [&](const float* row, std::size_t, int label) {
    int best = classes[0];
    for (int c : classes)
      if (row[c] > row[best]) best = c;
    return best == label;
  });
}

double top1_accuracy(const Supernet& net, const DiscreteArch& arch, const Split& split,
                     std::span<const std::size_t> indices, std::size_t batch_size) {
  return accuracy(net, arch, split, indices, batch_size, [](const float* row, std::size_t n, int label) {
    return static_cast<int>(std::max_element(row, row + n) - row) == label;
  });
}

std::vector<std::size_t> superclass_subset(const Split& split, const SuperclassPartition& partition, int t,
                                           std::size_t limit, std::uint64_t seed) {
  auto idx = split.indices_of(partition.classes(t));
  if (idx.size() > limit) {
    Rng rng = Rng(seed).split("subset").split(static_cast<std::uint64_t>(t));
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    idx.resize(limit);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

}  // namespace eas
