#pragma once

#include <cstdint>
#include <vector>

#include "eas/ops.h"
#include "eas/search_space.h"

namespace eas {

using MAdds = std::int64_t;

/// Multiply-adds of one inverted-residual block: expand 1x1, depthwise k x k
/// at `stride`, project 1x1. Nonlinearities and affine layers are not counted.
MAdds block_madds(MAdds h, MAdds w, MAdds c_in, MAdds expand, MAdds kernel, MAdds c_out,
                  MAdds stride);

/// Cost of one block slot as a polynomial over its gates:
///   active * (base + sum_i e_i*lin_e[i] + sum_j k_j*lin_k[j] + sum_ij e_i*k_j*bil[i][j])
/// where e_i, k_j are the expansion and kernel thermometer gates and `active`
/// is the depth gate that switches the slot on (1 when always on).
struct BlockCost {
  int active_gate = -1;  // -1: always on
  std::vector<int> expand_gates;
  std::vector<int> kernel_gates;
  MAdds base = 0;
  std::vector<MAdds> lin_e;
  std::vector<MAdds> lin_k;
  std::vector<std::vector<MAdds>> bil;  // [expand gate][kernel gate]
};

struct CostTable {
  MAdds stem = 0;
  MAdds head = 0;
  std::vector<BlockCost> blocks;  // unit-major
  int gate_count = 0;

  MAdds fixed() const { return stem + head; }
};

CostTable build_cost_table(const SearchSpace& space);

/// Exact integer cost of a normalized encoding. Throws SpaceError otherwise.
MAdds madds_exact(const ArchEncoding& enc, const CostTable& table, const SearchSpace& space);
/// Same, in millions.
double madds(const ArchEncoding& enc, const CostTable& table, const SearchSpace& space);
MAdds arch_madds_exact(const DiscreteArch& arch, const CostTable& table, const SearchSpace& space);
double arch_madds(const DiscreteArch& arch, const CostTable& table, const SearchSpace& space);

/// Polynomial on real-valued gate activations, in millions. When `grad` is
/// non-null it receives d(cost)/d(activation_i), also in millions.
double evaluate_polynomial(std::span<const double> activations, const CostTable& table,
                           std::vector<double>* grad = nullptr);

/// Graph node for the polynomial (millions), differentiable in the activations.
template <typename T>
Var<T> madds_differentiable(Var<T> activations, const CostTable& table) {
  if (activations.size() != static_cast<std::size_t>(table.gate_count))
    throw ShapeError("madds_differentiable", "expected " + std::to_string(table.gate_count) +
                                                 " activations, got " + shape_str(activations.shape()));
  const auto& a = activations.value();
  std::vector<double> x(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) x[i] = static_cast<double>(a[i]);
  std::vector<double> grad;
  const double value = evaluate_polynomial(x, table, &grad);
  return activations.graph->record(
      "madds", Tensor<T>::scalar(static_cast<T>(value)), {activations.id},
      [a_id = activations.id, grad = std::move(grad)](Graph<T>& g, int self) {
        const T d = g.grad_buffer(self)[0];
        detail::accumulate(g, a_id, [&](std::size_t i) { return d * static_cast<T>(grad[i]); });
      });
}

}  // namespace eas
