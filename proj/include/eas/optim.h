#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "eas/graph.h"

namespace eas {

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(std::string parameter)
      : std::runtime_error("non-finite gradient for parameter '" + parameter + "'"),
        parameter_(std::move(parameter)) {}
  const std::string& parameter() const { return parameter_; }

 private:
  std::string parameter_;
};

enum class OptimizerKind { kSgdMomentum, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kSgdMomentum;
  double learning_rate = 0.01;
  double momentum = 0.9;  // SGD
  double beta1 = 0.9;     // Adam
  double beta2 = 0.999;   // Adam
  double epsilon = 1e-8;  // Adam
  double weight_decay = 0.0;

  static OptimizerConfig sgd(double lr, double momentum = 0.9) {
    OptimizerConfig c;
    c.kind = OptimizerKind::kSgdMomentum;
    c.learning_rate = lr;
    c.momentum = momentum;
    return c;
  }
  static OptimizerConfig adam(double lr = 1e-3) {
    OptimizerConfig c;
    c.kind = OptimizerKind::kAdam;
    c.learning_rate = lr;
    return c;
  }
};

/// lr0 * 0.5 * (1 + cos(pi * epoch / total_epochs))
double cosine_learning_rate(double lr0, double epoch, double total_epochs);

/// SGD with momentum (v = mu*v + g; p -= lr*v) or bias-corrected Adam.
/// Moment buffers are created on first use and shape-match their parameter.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config);

  /// Applies one update to every parameter that has a gradient. Validates all
  /// gradients first, so a non-finite gradient leaves `params` untouched.
  void step(ParameterMap<float>& params, const ParameterMap<float>& grads);

  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  const OptimizerConfig& config() const { return config_; }
  std::int64_t steps() const { return steps_; }
  const ParameterMap<float>& first_moments() const { return first_; }
  const ParameterMap<float>& second_moments() const { return second_; }

 private:
  OptimizerConfig config_;
  std::int64_t steps_ = 0;
  ParameterMap<float> first_;
  ParameterMap<float> second_;
};

}  // namespace eas
