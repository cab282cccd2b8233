#include "eas/optim.h"

#include <cmath>
#include <numbers>

namespace eas {

double cosine_learning_rate(double lr0, double epoch, double total_epochs) {
  if (total_epochs <= 0) return lr0;
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / total_epochs));
}

Optimizer::Optimizer(OptimizerConfig config) : config_(config) {
  if (!(config_.learning_rate >= 0)) throw std::invalid_argument("learning rate must be >= 0");
  if (config_.momentum < 0 || config_.momentum >= 1 || config_.beta1 < 0 || config_.beta1 >= 1 ||
      config_.beta2 < 0 || config_.beta2 >= 1)
    throw std::invalid_argument("momentum/beta terms must lie in [0, 1)");
}

void Optimizer::step(ParameterMap<float>& params, const ParameterMap<float>& grads) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) continue;
    if (g.shape() != it->second.shape())
      throw ShapeError("optimizer", "gradient shape " + shape_str(g.shape()) + " for '" + name +
                                        "' vs parameter " + shape_str(it->second.shape()));
    if (!g.all_finite()) throw NonFiniteGradient(name);
  }
  ++steps_;
  const double lr = config_.learning_rate;
  const double wd = config_.weight_decay;
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) continue;
    TensorF& p = it->second;
    auto [mit, inserted] = first_.try_emplace(name, p.shape());
    TensorF& m = mit->second;
    if (config_.kind == OptimizerKind::kSgdMomentum) {
      const double mu = config_.momentum;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(g[i]) + wd * p[i];
        const double v = mu * m[i] + gi;
        m[i] = static_cast<float>(v);
        p[i] = static_cast<float>(p[i] - lr * v);
      }
    } else {
      TensorF& v = second_.try_emplace(name, p.shape()).first->second;
      const double b1 = config_.beta1, b2 = config_.beta2;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(g[i]) + wd * p[i];
        const double mi = b1 * m[i] + (1 - b1) * gi;
        const double vi = b2 * v[i] + (1 - b2) * gi * gi;
        m[i] = static_cast<float>(mi);
        v[i] = static_cast<float>(vi);
        p[i] = static_cast<float>(p[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + config_.epsilon));
      }
    }
  }
}

}  // namespace eas
