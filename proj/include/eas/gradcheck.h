#pragma once

#include <functional>
#include <string>
#include <vector>

#include "eas/graph.h"

namespace eas {

/// Builds a scalar loss from freshly registered parameters. Must be a pure
/// function of `params`: any noise has to be captured, not sampled.
using LossBuilder = std::function<Var<double>(Graph<double>&, const std::map<std::string, Var<double>>&)>;

struct GradientCheckOptions {
  double step = 1e-4;
  double tolerance = 1e-3;
  /// Denominator floor for relative error, guards near-zero gradients.
  double floor = 1e-6;
  /// Checks at most this many elements per parameter (evenly strided); 0 = all.
  std::size_t max_elements_per_parameter = 0;
};

struct GradientCheckEntry {
  std::string parameter;
  double max_relative_error = 0.0;
  std::size_t elements_checked = 0;
  /// Gradient depends on a straight-through estimator; reported but not held
  /// to the tolerance.
  bool estimator_dependent = false;
};

struct GradientCheckReport {
  std::vector<GradientCheckEntry> entries;
  /// One line per estimator node: "<op>#<id>: estimator, excluded from exactness check".
  std::vector<std::string> flagged_nodes;
  double tolerance = 0.0;

  /// Max error over entries that are held to the tolerance.
  double max_exact_error() const;
  bool passed() const { return max_exact_error() <= tolerance; }
};

/// Compares backward() against central differences for every parameter in
/// `params`, in double precision.
GradientCheckReport gradient_check(const LossBuilder& build, const ParameterMap<double>& params,
                                   const GradientCheckOptions& options = {});

}  // namespace eas
