#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "eas/dataset.h"
#include "eas/supernet.h"

namespace eas {

/// Target-superclass accuracy: among samples of superclass t, the fraction
/// whose argmax over t's classes only is the true label. This is how a
/// deployed, superclass-specialised model is scored.
double superclass_accuracy(const Supernet& net, const DiscreteArch& arch, const Split& split,
                           std::span<const std::size_t> indices, std::span<const int> classes,
                           std::size_t batch_size = 64);

/// Plain top-1 accuracy over all classes.
double top1_accuracy(const Supernet& net, const DiscreteArch& arch, const Split& split,
                     std::span<const std::size_t> indices, std::size_t batch_size = 64);

/// Up to `limit` samples of superclass t, a seeded subset when there are more.
std::vector<std::size_t> superclass_subset(const Split& split, const SuperclassPartition& partition, int t,
                                           std::size_t limit, std::uint64_t seed);

}  // namespace eas
