#include "eas/gradcheck.h"

#include <algorithm>
#include <cmath>

namespace eas {

double GradientCheckReport::max_exact_error() const {
  double m = 0.0;
  for (const auto& e : entries)
    if (!e.estimator_dependent) m = std::max(m, e.max_relative_error);
  return m;
}

namespace {

double evaluate(const LossBuilder& build, const ParameterMap<double>& params) {
  Graph<double> g;
  auto vars = g.parameters(params);
  return build(g, vars).value().item();
}

}  // namespace

GradientCheckReport gradient_check(const LossBuilder& build, const ParameterMap<double>& params,
                                   const GradientCheckOptions& options) {
  GradientCheckReport report;
  report.tolerance = options.tolerance;

  ParameterMap<double> analytic;
  ParameterMap<double> blocked;
  bool has_estimators = false;
  {
    Graph<double> g;
    auto vars = g.parameters(params);
    Var<double> loss = build(g, vars);
    has_estimators = g.has_estimators();
    for (const auto& label : g.estimator_labels())
      report.flagged_nodes.push_back(label + ": estimator, excluded from exactness check");
    analytic = g.backward(loss);
  }
  if (has_estimators) {
    Graph<double> g;
    auto vars = g.parameters(params);
    Var<double> loss = build(g, vars);
    blocked = g.backward(loss, BackwardOptions{.block_estimators = true});
  }

  ParameterMap<double> probe = params;
  for (const auto& [name, value] : params) {
    GradientCheckEntry entry;
    entry.parameter = name;
    const TensorD& grad = analytic.at(name);
    if (has_estimators) entry.estimator_dependent = !(blocked.at(name) == grad);

    const std::size_t n = value.size();
    std::size_t stride = 1;
    if (options.max_elements_per_parameter > 0 && n > options.max_elements_per_parameter)
      stride = (n + options.max_elements_per_parameter - 1) / options.max_elements_per_parameter;
    TensorD& p = probe.at(name);
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = p[i];
      p[i] = orig + options.step;
      const double up = evaluate(build, probe);
      p[i] = orig - options.step;
      const double down = evaluate(build, probe);
      p[i] = orig;
      const double numeric = (up - down) / (2 * options.step);
      const double denom = std::max({std::abs(numeric), std::abs(grad[i]), options.floor});
      entry.max_relative_error =
          std::max(entry.max_relative_error, std::abs(numeric - grad[i]) / denom);
      ++entry.elements_checked;
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace eas
