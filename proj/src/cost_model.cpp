#include "eas/cost_model.h"

namespace eas {

MAdds block_madds(MAdds h, MAdds w, MAdds c_in, MAdds expand, MAdds kernel, MAdds c_out,
                  MAdds stride) {
  const MAdds mid = expand * c_in;
  const MAdds out_plane = (h / stride) * (w / stride);
  return h * w * c_in * mid + out_plane * mid * kernel * kernel + out_plane * mid * c_out;
}

CostTable build_cost_table(const SearchSpace& space) {
  space.validate();
  CostTable t;
  t.gate_count = space.gate_count();
  const MAdds in_h = space.input_height, in_w = space.input_width;
  const MAdds sk = space.stem.kernel;
  t.stem = (in_h / space.stem.stride) * (in_w / space.stem.stride) * space.stem.channels *
           space.input_channels * sk * sk;
  t.head = static_cast<MAdds>(space.units.back().output_channels) * space.head.hidden +
           static_cast<MAdds>(space.head.hidden) * space.head.classes;

  const MAdds e0 = space.expand_choices.front();
  const MAdds k0 = space.kernel_choices.front();
  const auto layout = space.gate_layout();
  for (std::size_t u = 0; u < space.units.size(); ++u) {
    auto [h, w] = space.unit_input_size(u);
    for (int b = 0; b < space.units[u].max_blocks; ++b) {
      const MAdds c_in = space.block_input_channels(u, b);
      const MAdds c_out = space.units[u].output_channels;
      const MAdds s = space.block_stride(u, b);
      const MAdds plane = static_cast<MAdds>(h) * w;
      const MAdds out_plane = (h / s) * (w / s);
      // cost = e * A + e * k^2 * Bk with the terms below
      const MAdds A = plane * c_in * c_in + out_plane * c_in * c_out;
      const MAdds Bk = out_plane * c_in;

      BlockCost bc;
      const int gate = space.block_active_gate(u, b);
      if (gate == -2) continue;  // slot can never be active
      bc.active_gate = gate;
      bc.expand_gates = layout[u].blocks[b].expand;
      bc.kernel_gates = layout[u].blocks[b].kernel;
      bc.base = e0 * A + e0 * k0 * k0 * Bk;
      for (std::size_t i = 1; i < space.expand_choices.size(); ++i) {
        const MAdds de = space.expand_choices[i] - space.expand_choices[i - 1];
        bc.lin_e.push_back(de * (A + k0 * k0 * Bk));
        std::vector<MAdds> row;
        for (std::size_t j = 1; j < space.kernel_choices.size(); ++j) {
          const MAdds kj = space.kernel_choices[j], kp = space.kernel_choices[j - 1];
          row.push_back(de * (kj * kj - kp * kp) * Bk);
        }
        bc.bil.push_back(std::move(row));
      }
      for (std::size_t j = 1; j < space.kernel_choices.size(); ++j) {
        const MAdds kj = space.kernel_choices[j], kp = space.kernel_choices[j - 1];
        bc.lin_k.push_back(e0 * (kj * kj - kp * kp) * Bk);
      }
      t.blocks.push_back(std::move(bc));
      h /= static_cast<int>(s);
      w /= static_cast<int>(s);
    }
  }
  return t;
}

MAdds madds_exact(const ArchEncoding& enc, const CostTable& table, const SearchSpace& space) {
  if (!is_normalized(enc, space)) throw SpaceError("madds: encoding is not normalized");
  MAdds total = table.fixed();
  const auto& g = enc.gates;
  for (const BlockCost& bc : table.blocks) {
    if (bc.active_gate >= 0 && !g[bc.active_gate]) continue;
    MAdds c = bc.base;
    for (std::size_t i = 0; i < bc.expand_gates.size(); ++i)
      if (g[bc.expand_gates[i]]) c += bc.lin_e[i];
    for (std::size_t j = 0; j < bc.kernel_gates.size(); ++j)
      if (g[bc.kernel_gates[j]]) c += bc.lin_k[j];
    for (std::size_t i = 0; i < bc.expand_gates.size(); ++i)
      for (std::size_t j = 0; j < bc.kernel_gates.size(); ++j)
        if (g[bc.expand_gates[i]] && g[bc.kernel_gates[j]]) c += bc.bil[i][j];
    total += c;
  }
  return total;
}

double madds(const ArchEncoding& enc, const CostTable& table, const SearchSpace& space) {
  return static_cast<double>(madds_exact(enc, table, space)) / 1e6;
}

MAdds arch_madds_exact(const DiscreteArch& arch, const CostTable& table, const SearchSpace& space) {
  return madds_exact(from_discrete(arch, space), table, space);
}

double arch_madds(const DiscreteArch& arch, const CostTable& table, const SearchSpace& space) {
  return static_cast<double>(arch_madds_exact(arch, table, space)) / 1e6;
}

double evaluate_polynomial(std::span<const double> x, const CostTable& table,
                           std::vector<double>* grad) {
  if (x.size() != static_cast<std::size_t>(table.gate_count))
    throw ShapeError("madds_polynomial", "expected " + std::to_string(table.gate_count) +
                                             " activations, got " + std::to_string(x.size()));
  // Accumulate in raw multiply-adds (integers stay exact in a double) and
  // scale to millions once, so binary activations reproduce madds() exactly.
  if (grad) grad->assign(x.size(), 0.0);
  double total = static_cast<double>(table.fixed());
  for (const BlockCost& bc : table.blocks) {
    const double a = bc.active_gate >= 0 ? x[bc.active_gate] : 1.0;
    double c = static_cast<double>(bc.base);
    for (std::size_t i = 0; i < bc.expand_gates.size(); ++i) {
      const double ei = x[bc.expand_gates[i]];
      c += ei * static_cast<double>(bc.lin_e[i]);
      for (std::size_t j = 0; j < bc.kernel_gates.size(); ++j)
        c += ei * x[bc.kernel_gates[j]] * static_cast<double>(bc.bil[i][j]);
    }
    for (std::size_t j = 0; j < bc.kernel_gates.size(); ++j)
      c += x[bc.kernel_gates[j]] * static_cast<double>(bc.lin_k[j]);
    total += a * c;
    if (grad) {
      if (bc.active_gate >= 0) (*grad)[bc.active_gate] += c;
      for (std::size_t i = 0; i < bc.expand_gates.size(); ++i) {
        double d = static_cast<double>(bc.lin_e[i]);
        for (std::size_t j = 0; j < bc.kernel_gates.size(); ++j)
          d += x[bc.kernel_gates[j]] * static_cast<double>(bc.bil[i][j]);
        (*grad)[bc.expand_gates[i]] += a * d;
      }
      for (std::size_t j = 0; j < bc.kernel_gates.size(); ++j) {
        double d = static_cast<double>(bc.lin_k[j]);
        for (std::size_t i = 0; i < bc.expand_gates.size(); ++i)
          d += x[bc.expand_gates[i]] * static_cast<double>(bc.bil[i][j]);
        (*grad)[bc.kernel_gates[j]] += a * d;
      }
    }
  }
  if (grad)
    for (double& d : *grad) d /= 1e6;
  return total / 1e6;
}

}  // namespace eas
