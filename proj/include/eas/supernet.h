#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "eas/checkpoint.h"
#include "eas/ops.h"
#include "eas/rng.h"
#include "eas/search_space.h"

namespace eas {

class SupernetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
using VarMap = std::map<std::string, Var<T>>;

/// Shared weights of the elastic network. Every block stores its tensors at
/// the largest expansion and kernel; smaller choices read prefixes of the
/// channel dimension and the centred k x k window of the depthwise kernel.
///
/// Names: stem.{w,scale,bias}; u<U>.b<B>.{expand,dw,project}.{w,scale,bias};
/// head.fc1.{w,b}; head.fc2.{w,b}. Each convolution is followed by a learned
/// per-channel affine (scale, bias).
struct Supernet {
  SearchSpace space;
  ParameterMap<float> weights;

  static Supernet create(const SearchSpace& space, Rng& rng);
  /// Throws SupernetError when a tensor is missing or has the wrong shape.
  void check_shapes() const;
};

std::string block_prefix(std::size_t unit, std::size_t block);

/// Which elastic dimensions progressive shrinking has unlocked so far.
struct ElasticDims {
  bool kernel = true;
  bool depth = true;
  bool expand = true;

  static ElasticDims none() { return {false, false, false}; }
  static ElasticDims all() { return {true, true, true}; }
};

/// Uniform over unlocked choices; locked dimensions stay at their maximum.
DiscreteArch sample_arch(const SearchSpace& space, const ElasticDims& dims, Rng& rng);

/// Copies the weights a sub-network actually uses, already sliced.
struct StandaloneNet {
  SearchSpace space;
  DiscreteArch arch;
  ParameterMap<float> weights;
};

StandaloneNet extract(const Supernet& net, const DiscreteArch& arch);

void save_supernet(const std::filesystem::path& path, const Supernet& net,
                   std::map<std::string, std::string> metadata = {});
/// When `expected` is given the stored space hash must match it.
Supernet load_supernet(const std::filesystem::path& path, const SearchSpace* expected = nullptr);

// ---------------------------------------------------------------------------
// Forward passes. Templated on the scalar type so gradient checks can run the
// same code in double precision.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Var<T> head(const VarMap<T>& p, Var<T> features) {
  auto v = global_avg_pool(features);
  v = hardswish(linear(v, p.at("head.fc1.w"), p.at("head.fc1.b")));
  return linear(v, p.at("head.fc2.w"), p.at("head.fc2.b"));
}

/// Block output: projection, per-sample normalisation, then the affine. The
/// projection has a fixed width, so every sub-network normalises the same
/// tensor shape and the output scale no longer depends on the choices made
/// inside the block.
template <typename T>
Var<T> project(const VarMap<T>& p, const std::string& pre, Var<T> y, Var<T> w) {
  return channel_affine(sample_norm(pointwise_conv(y, w)), p.at(pre + ".project.scale"), p.at(pre + ".project.bias"));
}

template <typename T>
Var<T> stem(const SearchSpace& s, const VarMap<T>& p, Var<T> x) {
  auto y = conv2d(x, p.at("stem.w"), static_cast<std::size_t>(s.stem.stride));
  return hardswish(channel_affine(y, p.at("stem.scale"), p.at("stem.bias")));
}

inline std::size_t crop_offset(int max_k, int k) { return static_cast<std::size_t>((max_k - k) / 2); }

}  // namespace detail

/// Registers weights on `g`. Trainable weights receive gradients; constant
/// ones do not (and cost nothing in backward).
template <typename T>
VarMap<T> bind_weights(Graph<T>& g, const ParameterMap<T>& weights, bool trainable) {
  if (trainable) return g.parameters(weights);
  VarMap<T> out;
  for (const auto& [name, t] : weights) out.emplace(name, g.constant(t, name));
  return out;
}

/// Forward of one concrete sub-network using sliced views of shared weights.
/// Skipped blocks are not evaluated at all, so features pass through unchanged.
template <typename T>
Var<T> forward_arch(const SearchSpace& s, const VarMap<T>& p, Var<T> x, const DiscreteArch& arch) {
  validate_arch(arch, s);
  auto h = detail::stem(s, p, x);
  const int kmax = s.max_kernel();
  for (std::size_t u = 0; u < s.units.size(); ++u) {
    for (int b = 0; b < arch.units[u].depth; ++b) {
      const std::string pre = block_prefix(u, b);
      const auto c_in = static_cast<std::size_t>(s.block_input_channels(u, b));
      const auto& blk = arch.units[u].blocks[b];
      const std::size_t mid = static_cast<std::size_t>(blk.expand) * c_in;
      auto we = narrow(p.at(pre + ".expand.w"), 0, 0, mid);
      auto y = pointwise_conv(h, we);
      y = hardswish(channel_affine(y, narrow(p.at(pre + ".expand.scale"), 0, 0, mid),
                                   narrow(p.at(pre + ".expand.bias"), 0, 0, mid)));
      const std::size_t off = detail::crop_offset(kmax, blk.kernel);
      const auto k = static_cast<std::size_t>(blk.kernel);
      auto wd = narrow(p.at(pre + ".dw.w"), 0, 0, mid);
      if (k != static_cast<std::size_t>(kmax)) wd = narrow(narrow(wd, 1, off, k), 2, off, k);
      y = depthwise_conv(y, wd, static_cast<std::size_t>(s.block_stride(u, b)));
      y = hardswish(channel_affine(y, narrow(p.at(pre + ".dw.scale"), 0, 0, mid),
                                   narrow(p.at(pre + ".dw.bias"), 0, 0, mid)));
      y = detail::project(p, pre, y, narrow(p.at(pre + ".project.w"), 1, 0, mid));
      if (s.block_has_residual(u, b)) y = add(y, h);
      h = y;
    }
  }
  return detail::head(p, h);
}

/// Forward of the whole supernet where every elastic choice is weighted by a
/// gate activation taken from `gates` ([gate_count], already nested). With
/// 0/1 activations this reproduces forward_arch of the encoded architecture
/// bit for bit; with soft activations it is the relaxed network used to
/// differentiate the generator's loss with respect to gates.
///
///   depthwise kernel: W*M0 + sum_j K_j * (W*Ring_j)    (rings between sizes)
///   expansion:        channel mask with band j scaled by E_j
///   depth:            H_out = H*(1 - A) + F(H)*A
template <typename T>
Var<T> forward_gated(const SearchSpace& s, const VarMap<T>& p, Var<T> x, Var<T> gates) {
  if (gates.size() != static_cast<std::size_t>(s.gate_count()))
    throw ShapeError("forward_gated", "expected " + std::to_string(s.gate_count()) + " gates, got " +
                                          shape_str(gates.shape()));
  Graph<T>& g = *x.graph;
  const auto layout = s.gate_layout();
  const int kmax = s.max_kernel();
  auto gate = [&](int idx) { return narrow(gates, 0, static_cast<std::size_t>(idx), 1); };

  // Tap masks: the smallest kernel's window, then the ring each larger size adds.
  std::vector<Tensor<T>> rings;
  for (std::size_t j = 0; j < s.kernel_choices.size(); ++j) {
    Tensor<T> m(Shape{static_cast<std::size_t>(kmax), static_cast<std::size_t>(kmax)});
    for (int r = 0; r < kmax; ++r)
      for (int c = 0; c < kmax; ++c) {
        const int radius = std::max(std::abs(r - kmax / 2), std::abs(c - kmax / 2));
        const bool inside = radius <= s.kernel_choices[j] / 2;
        const bool in_smaller = j > 0 && radius <= s.kernel_choices[j - 1] / 2;
        if (inside && !in_smaller) m[r * kmax + c] = T{1};
      }
    rings.push_back(std::move(m));
  }

  auto h = detail::stem(s, p, x);
  for (std::size_t u = 0; u < s.units.size(); ++u) {
    for (int b = 0; b < s.units[u].max_blocks; ++b) {
      const int active = s.block_active_gate(u, b);
      if (active == -2) continue;
      const std::string pre = block_prefix(u, b);
      const auto c_in = static_cast<std::size_t>(s.block_input_channels(u, b));
      const std::size_t wide = static_cast<std::size_t>(s.max_expand()) * c_in;
      const auto& bg = layout[u].blocks[b];

      auto y = pointwise_conv(h, p.at(pre + ".expand.w"));
      y = hardswish(channel_affine(y, p.at(pre + ".expand.scale"), p.at(pre + ".expand.bias")));

      // effective depthwise kernel
      const Var<T> wd = p.at(pre + ".dw.w");
      auto expand_mask = [&](const Tensor<T>& m2d) {
        Tensor<T> full(wd.shape());
        const std::size_t plane = m2d.size();
        for (std::size_t c = 0; c < wide; ++c)
          for (std::size_t i = 0; i < plane; ++i) full[c * plane + i] = m2d[i];
        return full;
      };
      auto weff = mul_const(wd, expand_mask(rings[0]));
      for (std::size_t j = 0; j < bg.kernel.size(); ++j)
        weff = add(weff, mul_scalar(mul_const(wd, expand_mask(rings[j + 1])), gate(bg.kernel[j])));
      y = depthwise_conv(y, weff, static_cast<std::size_t>(s.block_stride(u, b)));
      y = hardswish(channel_affine(y, p.at(pre + ".dw.scale"), p.at(pre + ".dw.bias")));

      // expansion channel mask
      std::vector<Var<T>> parts;
      const std::size_t base = static_cast<std::size_t>(s.expand_choices.front()) * c_in;
      parts.push_back(g.constant(Tensor<T>(Shape{base}, T{1}), "ones"));
      for (std::size_t j = 0; j < bg.expand.size(); ++j) {
        const std::size_t n = static_cast<std::size_t>(s.expand_choices[j + 1] - s.expand_choices[j]) * c_in;
        parts.push_back(broadcast(gate(bg.expand[j]), n));
      }
      y = channel_mul(y, parts.size() == 1 ? parts[0] : concat(parts, 0));

      y = detail::project(p, pre, y, p.at(pre + ".project.w"));
      if (s.block_has_residual(u, b)) y = add(y, h);
      if (active >= 0) {
        const auto a = gate(active);
        y = add(mul_scalar(h, rsub_scalar(T{1}, a)), mul_scalar(y, a));
      }
      h = y;
    }
  }
  return detail::head(p, h);
}

/// Forward of an extracted network: plain convolutions over the copied slices.
template <typename T>
Var<T> forward_standalone(const SearchSpace& s, const DiscreteArch& arch, const VarMap<T>& p, Var<T> x) {
  auto h = detail::stem(s, p, x);
  for (std::size_t u = 0; u < s.units.size(); ++u)
    for (int b = 0; b < arch.units[u].depth; ++b) {
      const std::string pre = block_prefix(u, b);
      auto y = pointwise_conv(h, p.at(pre + ".expand.w"));
      y = hardswish(channel_affine(y, p.at(pre + ".expand.scale"), p.at(pre + ".expand.bias")));
      y = depthwise_conv(y, p.at(pre + ".dw.w"), static_cast<std::size_t>(s.block_stride(u, b)));
      y = hardswish(channel_affine(y, p.at(pre + ".dw.scale"), p.at(pre + ".dw.bias")));
      y = detail::project(p, pre, y, p.at(pre + ".project.w"));
      if (s.block_has_residual(u, b)) y = add(y, h);
      h = y;
    }
  return detail::head(p, h);
}

/// Inference helpers over float weights (no gradients are recorded).
TensorF infer(const Supernet& net, const TensorF& x, const DiscreteArch& arch);
TensorF infer(const Supernet& net, const TensorF& x, const ArchEncoding& enc);
TensorF infer(const StandaloneNet& net, const TensorF& x);

}  // namespace eas
