#pragma once

// Differentiable operations on Graph nodes. Every op checks shapes eagerly
// and throws ShapeError naming itself on mismatch.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "eas/graph.h"
#include "eas/kernels.h"

namespace eas {

class MaskError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename T>
void require_same_shape(const char* op, Var<T> a, Var<T> b) {
  if (a.shape() != b.shape())
    throw ShapeError(op, "operand shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ");
}

template <typename T>
void require_rank(const char* op, Var<T> a, std::size_t rank) {
  if (a.value().rank() != rank)
    throw ShapeError(op, "expected rank " + std::to_string(rank) + ", got " +
                             shape_str(a.shape()));
}

// g[id] += f(i) for every element, only if node id needs a gradient.
template <typename T, typename F>
void accumulate(Graph<T>& g, int id, F&& f) {
  if (!g.requires_grad(id)) return;
  Tensor<T>& gb = g.grad_buffer(id);
  for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += f(i);
}

template <typename T>
void accumulate_tensor(Graph<T>& g, int id, Tensor<T>&& t) {
  g.accumulate_grad(id, std::move(t));
}

template <typename T>
void accumulate_tensor(Graph<T>& g, int id, const Tensor<T>& t) {
  if (!g.requires_grad(id)) return;
  Tensor<T>& gb = g.grad_buffer(id);
  for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += t[i];
}

template <typename T, typename F, typename D>
Var<T> unary(const char* op, Var<T> a, F&& f, D&& dfdx) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& x = a.value();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return g.record(op, std::move(y), {a.id}, [a_id = a.id, dfdx](Graph<T>& gr, int self) {
    const Tensor<T>& xv = gr.value(a_id);
    const Tensor<T>& yv = gr.value(self);
    const Tensor<T>& dy = gr.grad_buffer(self);
    accumulate(gr, a_id, [&](std::size_t i) { return dy[i] * dfdx(xv[i], yv[i]); });
  });
}

inline std::size_t plane_size(const Shape& s) {
  std::size_t p = 1;
  for (std::size_t d = 2; d < s.size(); ++d) p *= s[d];
  return p;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape("add", a, b);
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] + b.value()[i];
  return a.graph->record("add", std::move(y), {a.id, b.id}, [a_id = a.id, b_id = b.id](Graph<T>& g, int self) {
    const Tensor<T>& dy = g.grad_buffer(self);
    detail::accumulate_tensor(g, a_id, dy);
    detail::accumulate_tensor(g, b_id, dy);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape("sub", a, b);
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] - b.value()[i];
  return a.graph->record("sub", std::move(y), {a.id, b.id}, [a_id = a.id, b_id = b.id](Graph<T>& g, int self) {
    const Tensor<T>& dy = g.grad_buffer(self);
    detail::accumulate_tensor(g, a_id, dy);
    detail::accumulate(g, b_id, [&](std::size_t i) { return -dy[i]; });
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape("mul", a, b);
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  return a.graph->record("mul", std::move(y), {a.id, b.id}, [a_id = a.id, b_id = b.id](Graph<T>& g, int self) {
    const Tensor<T>& dy = g.grad_buffer(self);
    const Tensor<T>& av = g.value(a_id);
    const Tensor<T>& bv = g.value(b_id);
    detail::accumulate(g, a_id, [&](std::size_t i) { return dy[i] * bv[i]; });
    detail::accumulate(g, b_id, [&](std::size_t i) { return dy[i] * av[i]; });
  });
}

template <typename T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T>
Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

template <typename T>
Var<T> scale(Var<T> a, T c) {
  return detail::unary("scale", a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
  return detail::unary("add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T{1}; });
}

/// c - a, elementwise.
template <typename T>
Var<T> rsub_scalar(T c, Var<T> a) {
  return detail::unary("rsub_scalar", a, [c](T x) { return c - x; }, [](T, T) { return T{-1}; });
}

template <typename T>
Var<T> square(Var<T> a) {
  return detail::unary("square", a, [](T x) { return x * x; }, [](T x, T) { return 2 * x; });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return detail::unary(
      "sigmoid", a, [](T x) { return T{1} / (T{1} + std::exp(-x)); },
      [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  return detail::unary("tanh", a, [](T x) { return std::tanh(x); },
                       [](T, T y) { return T{1} - y * y; });
}

template <typename T>
Var<T> log(Var<T> a) {
  return detail::unary("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T{1} / x; });
}

template <typename T>
Var<T> exp(Var<T> a) {
  return detail::unary("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> relu(Var<T> a) {
  return detail::unary("relu", a, [](T x) { return x > 0 ? x : T{0}; },
                       [](T x, T) { return x > 0 ? T{1} : T{0}; });
}

/// x * relu6(x + 3) / 6
template <typename T>
Var<T> hardswish(Var<T> a) {
  return detail::unary(
      "hardswish", a,
      // Written as selects so the loops vectorize.
      [](T x) {
        const T mid = x * (x + T{3}) / T{6};
        return x >= T{3} ? x : (x <= T{-3} ? T{0} : mid);
      },
      [](T x, T) {
        const T mid = (T{2} * x + T{3}) / T{6};
        return x >= T{3} ? T{1} : (x <= T{-3} ? T{0} : mid);
      });
}

/// Clamp with zero gradient outside [lo, hi].
template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  return detail::unary("clamp", a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
                       [lo, hi](T x, T) { return (x < lo || x > hi) ? T{0} : T{1}; });
}

/// Multiplies by a constant tensor of the same shape.
template <typename T>
Var<T> mul_const(Var<T> a, const Tensor<T>& c) {
  if (a.shape() != c.shape())
    throw ShapeError("mul_const", shape_str(a.shape()) + " vs " + shape_str(c.shape()));
  Tensor<T> y(a.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * c[i];
  return a.graph->record("mul_const", std::move(y), {a.id}, [a_id = a.id, c](Graph<T>& g, int self) {
    const Tensor<T>& dy = g.grad_buffer(self);
    detail::accumulate(g, a_id, [&](std::size_t i) { return dy[i] * c[i]; });
  });
}

/// Hard threshold soft > 0.5 in the value path; identity in the gradient path.
template <typename T>
Var<T> straight_through(Var<T> soft) {
  const Tensor<T>& s = soft.value();
  Tensor<T> y(s.shape());
  for (std::size_t i = 0; i < s.size(); ++i) y[i] = s[i] > T{0.5} ? T{1} : T{0};
  return soft.graph->record(
      "straight_through", std::move(y), {soft.id},
      [s_id = soft.id](Graph<T>& g, int self) {
        detail::accumulate_tensor(g, s_id, g.grad_buffer(self));
      },
      /*estimator=*/true);
}

// ---------------------------------------------------------------------------
// Scalars, broadcasting, reductions
// ---------------------------------------------------------------------------

/// x * s where s is a one-element node.
template <typename T>
Var<T> mul_scalar(Var<T> x, Var<T> s) {
  if (s.size() != 1) throw ShapeError("mul_scalar", "scale must have one element");
  const T sv = s.value()[0];
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x.value()[i] * sv;
  return x.graph->record("mul_scalar", std::move(y), {x.id, s.id},
                         [x_id = x.id, s_id = s.id](Graph<T>& g, int self) {
                           const Tensor<T>& dy = g.grad_buffer(self);
                           const T sv = g.value(s_id)[0];
                           detail::accumulate(g, x_id, [&](std::size_t i) { return dy[i] * sv; });
                           if (g.requires_grad(s_id)) {
                             const Tensor<T>& xv = g.value(x_id);
                             T acc = 0;
                             for (std::size_t i = 0; i < dy.size(); ++i) acc += dy[i] * xv[i];
                             g.grad_buffer(s_id)[0] += acc;
                           }
                         });
}

/// Repeats a one-element node n times.
template <typename T>
Var<T> broadcast(Var<T> s, std::size_t n) {
  if (s.size() != 1) throw ShapeError("broadcast", "source must have one element");
  Tensor<T> y(Shape{n}, s.value()[0]);
  return s.graph->record("broadcast", std::move(y), {s.id}, [s_id = s.id](Graph<T>& g, int self) {
    const Tensor<T>& dy = g.grad_buffer(self);
    T acc = 0;
    for (std::size_t i = 0; i < dy.size(); ++i) acc += dy[i];
    g.grad_buffer(s_id)[0] += acc;
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T acc = 0;
  for (T v : a.value().values()) acc += v;
  return a.graph->record("sum", Tensor<T>::scalar(acc), {a.id}, [a_id = a.id](Graph<T>& g, int self) {
    const T d = g.grad_buffer(self)[0];
    detail::accumulate(g, a_id, [d](std::size_t) { return d; });
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T{1} / static_cast<T>(a.size()));
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> y = a.value().reshaped(std::move(shape));
  return a.graph->record("reshape", std::move(y), {a.id}, [a_id = a.id](Graph<T>& g, int self) {
    detail::accumulate_tensor(g, a_id, g.grad_buffer(self));
  });
}

/// Slice [start, start + len) along `dim`.
template <typename T>
Var<T> narrow(Var<T> a, std::size_t dim, std::size_t start, std::size_t len) {
  const Shape& in = a.shape();
  if (dim >= in.size() || start + len > in[dim] || len == 0)
    throw ShapeError("narrow", "range [" + std::to_string(start) + "," +
                                   std::to_string(start + len) + ") on dim " +
                                   std::to_string(dim) + " of " + shape_str(in));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < dim; ++d) outer *= in[d];
  for (std::size_t d = dim + 1; d < in.size(); ++d) inner *= in[d];
  Shape out_shape = in;
  out_shape[dim] = len;
  Tensor<T> y(out_shape);
  const T* src = a.value().data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(src + (o * in[dim] + start) * inner, len * inner, y.data() + o * len * inner);
  const std::size_t full = in[dim];
  return a.graph->record("narrow", std::move(y), {a.id},
                         [a_id = a.id, outer, inner, full, start, len](Graph<T>& g, int self) {
                           if (!g.requires_grad(a_id)) return;
                           const Tensor<T>& dy = g.grad_buffer(self);
                           Tensor<T>& dx = g.grad_buffer(a_id);
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t i = 0; i < len * inner; ++i)
                               dx[(o * full + start) * inner + i] += dy[o * len * inner + i];
                         });
}

/// Concatenates along `dim`; all other dims must agree.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t dim) {
  if (parts.empty()) throw ShapeError("concat", "no inputs");
  Shape out_shape = parts[0].shape();
  if (dim >= out_shape.size()) throw ShapeError("concat", "dim out of range");
  out_shape[dim] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat", "rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != dim && s[d] != out_shape[d])
        throw ShapeError("concat", "shape " + shape_str(s) + " incompatible");
    out_shape[dim] += s[dim];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < dim; ++d) outer *= out_shape[d];
  for (std::size_t d = dim + 1; d < out_shape.size(); ++d) inner *= out_shape[d];
  Tensor<T> y(out_shape);
  std::vector<int> ids;
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[dim];
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.value().data() + o * w * inner, w * inner,
                  y.data() + (o * out_shape[dim] + offset) * inner);
    offset += w;
    ids.push_back(p.id);
    widths.push_back(w);
  }
  const std::size_t total = out_shape[dim];
  return parts[0].graph->record(
      "concat", std::move(y), ids, [ids, widths, outer, inner, total](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.grad_buffer(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (g.requires_grad(ids[k])) {
            Tensor<T>& dx = g.grad_buffer(ids[k]);
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t i = 0; i < widths[k] * inner; ++i)
                dx[o * widths[k] * inner + i] += dy[(o * total + off) * inner + i];
          }
          off += widths[k];
        }
      });
}

// ---------------------------------------------------------------------------
// Channel-wise ops on [N, C, ...] tensors
// ---------------------------------------------------------------------------

/// y[n,c,...] = x[n,c,...] * scale[c] + bias[c]
template <typename T>
Var<T> channel_affine(Var<T> x, Var<T> scale_v, Var<T> bias_v) {
  const Shape& s = x.shape();
  if (s.size() < 2 || scale_v.shape() != Shape{s[1]} || bias_v.shape() != Shape{s[1]})
    throw ShapeError("channel_affine", "x " + shape_str(s) + ", scale " +
                                           shape_str(scale_v.shape()) + ", bias " +
                                           shape_str(bias_v.shape()));
  const std::size_t n_batch = s[0], chans = s[1], plane = detail::plane_size(s);
  Tensor<T> y(s);
  const T* xv = x.value().data();
  const T* sc = scale_v.value().data();
  const T* bi = bias_v.value().data();
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t c = 0; c < chans; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t i = (n * chans + c) * plane + p;
        y[i] = xv[i] * sc[c] + bi[c];
      }
  return x.graph->record(
      "channel_affine", std::move(y), {x.id, scale_v.id, bias_v.id},
      [x_id = x.id, s_id = scale_v.id, b_id = bias_v.id, n_batch, chans, plane](Graph<T>& g,
                                                                                int self) {
        const Tensor<T>& dy = g.grad_buffer(self);
        const Tensor<T>& xv = g.value(x_id);
        const Tensor<T>& sc = g.value(s_id);
        if (g.requires_grad(x_id)) {
          Tensor<T>& dx = g.grad_buffer(x_id);
          for (std::size_t n = 0; n < n_batch; ++n)
            for (std::size_t c = 0; c < chans; ++c)
              for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t i = (n * chans + c) * plane + p;
                dx[i] += dy[i] * sc[c];
              }
        }
        const bool need_s = g.requires_grad(s_id), need_b = g.requires_grad(b_id);
        if (need_s || need_b) {
          std::vector<T> ds(chans, T{0}), db(chans, T{0});
          for (std::size_t n = 0; n < n_batch; ++n)
            for (std::size_t c = 0; c < chans; ++c)
              for (std::size_t p = 0; p < plane; ++p) {
                const std::size_t i = (n * chans + c) * plane + p;
                ds[c] += dy[i] * xv[i];
                db[c] += dy[i];
              }
          if (need_s) detail::accumulate(g, s_id, [&](std::size_t c) { return ds[c]; });
          if (need_b) detail::accumulate(g, b_id, [&](std::size_t c) { return db[c]; });
        }
      });
}

/// y[n,c,...] = x[n,c,...] * m[c]
template <typename T>
Var<T> channel_mul(Var<T> x, Var<T> m) {
  const Shape& s = x.shape();
  if (s.size() < 2 || m.shape() != Shape{s[1]})
    throw ShapeError("channel_mul", "x " + shape_str(s) + ", mask " + shape_str(m.shape()));
  const std::size_t n_batch = s[0], chans = s[1], plane = detail::plane_size(s);
  Tensor<T> y(s);
  const T* xv = x.value().data();
  const T* mv = m.value().data();
  for (std::size_t n = 0; n < n_batch; ++n)
    for (std::size_t c = 0; c < chans; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t i = (n * chans + c) * plane + p;
        y[i] = xv[i] * mv[c];
      }
  return x.graph->record("channel_mul", std::move(y), {x.id, m.id},
                         [x_id = x.id, m_id = m.id, n_batch, chans, plane](Graph<T>& g, int self) {
                           const Tensor<T>& dy = g.grad_buffer(self);
                           const Tensor<T>& xv = g.value(x_id);
                           const Tensor<T>& mv = g.value(m_id);
                           if (g.requires_grad(x_id)) {
                             Tensor<T>& dx = g.grad_buffer(x_id);
                             for (std::size_t n = 0; n < n_batch; ++n)
                               for (std::size_t c = 0; c < chans; ++c)
                                 for (std::size_t p = 0; p < plane; ++p) {
                                   const std::size_t i = (n * chans + c) * plane + p;
                                   dx[i] += dy[i] * mv[c];
                                 }
                           }
                           if (g.requires_grad(m_id)) {
                             std::vector<T> dm(chans, T{0});
                             for (std::size_t n = 0; n < n_batch; ++n)
                               for (std::size_t c = 0; c < chans; ++c)
                                 for (std::size_t p = 0; p < plane; ++p) {
                                   const std::size_t i = (n * chans + c) * plane + p;
                                   dm[c] += dy[i] * xv[i];
                                 }
                             detail::accumulate(g, m_id, [&](std::size_t c) { return dm[c]; });
                           }
                         });
}

/// [N, C, H, W] -> [N, C]
template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  detail::require_rank("global_avg_pool", x, 4);
  const Shape& s = x.shape();
  const std::size_t nc = s[0] * s[1], plane = s[2] * s[3];
  Tensor<T> y(Shape{s[0], s[1]});
  const T inv = T{1} / static_cast<T>(plane);
  for (std::size_t i = 0; i < nc; ++i) {
    T acc = 0;
    for (std::size_t p = 0; p < plane; ++p) acc += x.value()[i * plane + p];
    y[i] = acc * inv;
  }
  return x.graph->record("global_avg_pool", std::move(y), {x.id},
                         [x_id = x.id, nc, plane, inv](Graph<T>& g, int self) {
                           if (!g.requires_grad(x_id)) return;
                           const Tensor<T>& dy = g.grad_buffer(self);
                           Tensor<T>& dx = g.grad_buffer(x_id);
                           for (std::size_t i = 0; i < nc; ++i)
                             for (std::size_t p = 0; p < plane; ++p) dx[i * plane + p] += dy[i] * inv;
                         });
}

/// Normalises every sample of [N, ...] to zero mean and unit variance over
/// all of its elements. Statistics are per sample, so batch composition never
/// changes a sample's output.
template <typename T>
Var<T> sample_norm(Var<T> x, double eps = 1e-5) {
  const Shape& s = x.shape();
  if (s.empty() || s[0] == 0) throw ShapeError("sample_norm", "expected a batch, got " + shape_str(s));
  const std::size_t n = s[0], m = x.size() / s[0];
  const Tensor<T>& xv = x.value();
  Tensor<T> y(s);
  std::vector<T> rstd(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = xv.data() + i * m;
    double sum = 0;
    for (std::size_t k = 0; k < m; ++k) sum += static_cast<double>(row[k]);
    const double mean = sum / static_cast<double>(m);
    double sq = 0;
    for (std::size_t k = 0; k < m; ++k) {
      const double d = static_cast<double>(row[k]) - mean;
      sq += d * d;
    }
    const double r = 1.0 / std::sqrt(sq / static_cast<double>(m) + eps);
    rstd[i] = static_cast<T>(r);
    T* out = y.data() + i * m;
    for (std::size_t k = 0; k < m; ++k) out[k] = static_cast<T>((static_cast<double>(row[k]) - mean) * r);
  }
  return x.graph->record("sample_norm", std::move(y), {x.id},
                         [x_id = x.id, n, m, rstd = std::move(rstd)](Graph<T>& g, int self) {
                           if (!g.requires_grad(x_id)) return;
                           const Tensor<T>& yv = g.value(self);
                           const Tensor<T>& dy = g.grad_buffer(self);
                           Tensor<T>& dx = g.grad_buffer(x_id);
                           // dx = r * (dy - mean(dy) - y * mean(dy * y))
                           for (std::size_t i = 0; i < n; ++i) {
                             const std::size_t o = i * m;
                             double sd = 0, sdy = 0;
                             for (std::size_t k = 0; k < m; ++k) {
                               sd += static_cast<double>(dy[o + k]);
                               sdy += static_cast<double>(dy[o + k]) * static_cast<double>(yv[o + k]);
                             }
                             const double md = sd / static_cast<double>(m), mdy = sdy / static_cast<double>(m);
                             const double r = static_cast<double>(rstd[i]);
                             for (std::size_t k = 0; k < m; ++k)
                               dx[o + k] += static_cast<T>(
                                   r * (static_cast<double>(dy[o + k]) - md - static_cast<double>(yv[o + k]) * mdy));
                           }
                         });
}

// ---------------------------------------------------------------------------
// Linear algebra and convolutions
// ---------------------------------------------------------------------------

/// [M,K] x [K,N] -> [M,N]
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const auto m = static_cast<kernels::Index>(a.shape()[0]);
  const auto k = static_cast<kernels::Index>(a.shape()[1]);
  const auto n = static_cast<kernels::Index>(b.shape()[1]);
  if (b.shape()[0] != a.shape()[1])
    throw ShapeError("matmul", shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> y(Shape{a.shape()[0], b.shape()[1]});
  kernels::parallel::matmul_nn(a.value().data(), b.value().data(), y.data(), m, k, n);
  return a.graph->record("matmul", std::move(y), {a.id, b.id},
                         [a_id = a.id, b_id = b.id, m, k, n](Graph<T>& g, int self) {
                           const Tensor<T>& dy = g.grad_buffer(self);
                           if (g.requires_grad(a_id)) {
                             Tensor<T> da(Shape{static_cast<std::size_t>(m), static_cast<std::size_t>(k)});
                             kernels::parallel::matmul_nt(dy.data(), g.value(b_id).data(), da.data(), m, n, k);
                             detail::accumulate_tensor(g, a_id, std::move(da));
                           }
                           if (g.requires_grad(b_id)) {
                             Tensor<T> db(Shape{static_cast<std::size_t>(k), static_cast<std::size_t>(n)});
                             kernels::parallel::matmul_tn(g.value(a_id).data(), dy.data(), db.data(), k, m, n);
                             detail::accumulate_tensor(g, b_id, std::move(db));
                           }
                         });
}

/// x[N,in] W[out,in]^T + b[out]
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  detail::require_rank("linear", x, 2);
  detail::require_rank("linear", w, 2);
  const std::size_t rows = x.shape()[0], in = x.shape()[1], out = w.shape()[0];
  if (w.shape()[1] != in || b.shape() != Shape{out})
    throw ShapeError("linear", "x " + shape_str(x.shape()) + ", W " + shape_str(w.shape()) +
                                   ", b " + shape_str(b.shape()));
  Tensor<T> y(Shape{rows, out});
  kernels::parallel::matmul_nt(x.value().data(), w.value().data(), y.data(),
                               static_cast<kernels::Index>(rows), static_cast<kernels::Index>(in),
                               static_cast<kernels::Index>(out));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o) y[r * out + o] += b.value()[o];
  return x.graph->record(
      "linear", std::move(y), {x.id, w.id, b.id},
      [x_id = x.id, w_id = w.id, b_id = b.id, rows, in, out](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.grad_buffer(self);
        const auto r = static_cast<kernels::Index>(rows), ki = static_cast<kernels::Index>(in),
                   ko = static_cast<kernels::Index>(out);
        if (g.requires_grad(x_id)) {
          Tensor<T> dx(Shape{rows, in});
          kernels::parallel::matmul_nn(dy.data(), g.value(w_id).data(), dx.data(), r, ko, ki);
          detail::accumulate_tensor(g, x_id, std::move(dx));
        }
        if (g.requires_grad(w_id)) {
          Tensor<T> dw(Shape{out, in});
          kernels::parallel::matmul_tn(dy.data(), g.value(x_id).data(), dw.data(), ko, r, ki);
          detail::accumulate_tensor(g, w_id, std::move(dw));
        }
        if (g.requires_grad(b_id)) {
          Tensor<T>& db = g.grad_buffer(b_id);
          for (std::size_t rr = 0; rr < rows; ++rr)
            for (std::size_t o = 0; o < out; ++o) db[o] += dy[rr * out + o];
        }
      });
}

/// Dense 2-D convolution, x [N,Cin,H,W], w [Cout,Cin,k,k], "same"-style pad k/2.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::size_t stride) {
  detail::require_rank("conv2d", x, 4);
  detail::require_rank("conv2d", w, 4);
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws[1] != xs[1] || ws[2] != ws[3])
    throw ShapeError("conv2d", "x " + shape_str(xs) + ", w " + shape_str(ws));
  kernels::ConvGeometry geo;
  geo.batch = static_cast<kernels::Index>(xs[0]);
  geo.c_in = static_cast<kernels::Index>(xs[1]);
  geo.c_out = static_cast<kernels::Index>(ws[0]);
  geo.height = static_cast<kernels::Index>(xs[2]);
  geo.width = static_cast<kernels::Index>(xs[3]);
  geo.kernel = static_cast<kernels::Index>(ws[2]);
  geo.stride = static_cast<kernels::Index>(stride);
  geo.pad = geo.kernel / 2;
  Tensor<T> y(Shape{xs[0], ws[0], static_cast<std::size_t>(geo.out_height()),
                    static_cast<std::size_t>(geo.out_width())});
  kernels::parallel::conv2d_forward(x.value().data(), w.value().data(), y.data(), geo);
  return x.graph->record("conv2d", std::move(y), {x.id, w.id},
                         [x_id = x.id, w_id = w.id, geo](Graph<T>& g, int self) {
                           const Tensor<T>& dy = g.grad_buffer(self);
                           if (g.requires_grad(x_id)) {
                             Tensor<T> dx(g.value(x_id).shape());
                             kernels::parallel::conv2d_backward_data(dy.data(), g.value(w_id).data(), dx.data(), geo);
                             detail::accumulate_tensor(g, x_id, std::move(dx));
                           }
                           if (g.requires_grad(w_id)) {
                             Tensor<T> dw(g.value(w_id).shape());
                             kernels::parallel::conv2d_backward_weight(dy.data(), g.value(x_id).data(), dw.data(), geo);
                             detail::accumulate_tensor(g, w_id, std::move(dw));
                           }
                         });
}

/// Depthwise convolution, x [N,C,H,W], w [C,k,k], pad k/2.
template <typename T>
Var<T> depthwise_conv(Var<T> x, Var<T> w, std::size_t stride) {
  detail::require_rank("depthwise_conv", x, 4);
  detail::require_rank("depthwise_conv", w, 3);
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws[0] != xs[1] || ws[1] != ws[2])
    throw ShapeError("depthwise_conv", "x " + shape_str(xs) + ", w " + shape_str(ws));
  kernels::ConvGeometry geo;
  geo.batch = static_cast<kernels::Index>(xs[0]);
  geo.c_in = geo.c_out = static_cast<kernels::Index>(xs[1]);
  geo.height = static_cast<kernels::Index>(xs[2]);
  geo.width = static_cast<kernels::Index>(xs[3]);
  geo.kernel = static_cast<kernels::Index>(ws[1]);
  geo.stride = static_cast<kernels::Index>(stride);
  geo.pad = geo.kernel / 2;
  Tensor<T> y(Shape{xs[0], xs[1], static_cast<std::size_t>(geo.out_height()),
                    static_cast<std::size_t>(geo.out_width())});
  kernels::parallel::depthwise_forward(x.value().data(), w.value().data(), y.data(), geo);
  return x.graph->record("depthwise_conv", std::move(y), {x.id, w.id},
                         [x_id = x.id, w_id = w.id, geo](Graph<T>& g, int self) {
                           const Tensor<T>& dy = g.grad_buffer(self);
                           if (g.requires_grad(x_id)) {
                             Tensor<T> dx(g.value(x_id).shape());
                             kernels::parallel::depthwise_backward_data(dy.data(), g.value(w_id).data(), dx.data(), geo);
                             detail::accumulate_tensor(g, x_id, std::move(dx));
                           }
                           if (g.requires_grad(w_id)) {
                             Tensor<T> dw(g.value(w_id).shape());
                             kernels::parallel::depthwise_backward_weight(dy.data(), g.value(x_id).data(), dw.data(), geo);
                             detail::accumulate_tensor(g, w_id, std::move(dw));
                           }
                         });
}

/// 1x1 convolution, x [N,Cin,H,W], w [Cout,Cin].
template <typename T>
Var<T> pointwise_conv(Var<T> x, Var<T> w) {
  detail::require_rank("pointwise_conv", x, 4);
  detail::require_rank("pointwise_conv", w, 2);
  const Shape& xs = x.shape();
  if (w.shape()[1] != xs[1])
    throw ShapeError("pointwise_conv", "x " + shape_str(xs) + ", w " + shape_str(w.shape()));
  const auto batch = static_cast<kernels::Index>(xs[0]);
  const auto c_in = static_cast<kernels::Index>(xs[1]);
  const auto c_out = static_cast<kernels::Index>(w.shape()[0]);
  const auto plane = static_cast<kernels::Index>(xs[2] * xs[3]);
  Tensor<T> y(Shape{xs[0], w.shape()[0], xs[2], xs[3]});
  kernels::parallel::pointwise_forward(x.value().data(), w.value().data(), y.data(), batch, c_in,
                                       c_out, plane);
  return x.graph->record(
      "pointwise_conv", std::move(y), {x.id, w.id},
      [x_id = x.id, w_id = w.id, batch, c_in, c_out, plane](Graph<T>& g, int self) {
        const Tensor<T>& dy = g.grad_buffer(self);
        if (g.requires_grad(x_id)) {
          Tensor<T> dx(g.value(x_id).shape());
          kernels::parallel::pointwise_backward_data(dy.data(), g.value(w_id).data(), dx.data(),
                                                     batch, c_in, c_out, plane);
          detail::accumulate_tensor(g, x_id, std::move(dx));
        }
        if (g.requires_grad(w_id)) {
          Tensor<T> dw(g.value(w_id).shape());
          kernels::parallel::pointwise_backward_weight(dy.data(), g.value(x_id).data(), dw.data(),
                                                       batch, c_in, c_out, plane);
          detail::accumulate_tensor(g, w_id, std::move(dw));
        }
      });
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean cross-entropy where row n's softmax runs only over classes with
/// keep[n,c] != 0; dropped logits behave as -inf. The label's own class must
/// be kept.
template <typename T>
Var<T> masked_cross_entropy(Var<T> logits, const Tensor<T>& keep, std::span<const int> labels) {
  detail::require_rank("masked_cross_entropy", logits, 2);
  const std::size_t rows = logits.shape()[0], classes = logits.shape()[1];
  if (keep.shape() != logits.shape() || labels.size() != rows)
    throw ShapeError("masked_cross_entropy", "logits " + shape_str(logits.shape()) + ", mask " +
                                                 shape_str(keep.shape()) + ", labels " +
                                                 std::to_string(labels.size()));
  const Tensor<T>& o = logits.value();
  Tensor<T> prob(logits.shape());
  T total = 0;
  for (std::size_t n = 0; n < rows; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw MaskError("masked_cross_entropy: label " + std::to_string(y) + " out of range");
    if (keep[n * classes + y] == T{0})
      throw MaskError("masked_cross_entropy: label class " + std::to_string(y) + " of row " +
                      std::to_string(n) + " is masked out");
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < classes; ++c)
      if (keep[n * classes + c] != T{0}) mx = std::max(mx, o[n * classes + c]);
    T z = 0;
    for (std::size_t c = 0; c < classes; ++c)
      if (keep[n * classes + c] != T{0}) {
        const T e = std::exp(o[n * classes + c] - mx);
        prob[n * classes + c] = e;
        z += e;
      }
    for (std::size_t c = 0; c < classes; ++c) prob[n * classes + c] /= z;
    total += -(o[n * classes + y] - mx - std::log(z));
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.graph->record(
      "masked_cross_entropy", Tensor<T>::scalar(total / static_cast<T>(rows)), {logits.id},
      [l_id = logits.id, prob = std::move(prob), lab = std::move(lab), rows, classes](Graph<T>& g,
                                                                                    int self) {
        if (!g.requires_grad(l_id)) return;
        const T d = g.grad_buffer(self)[0] / static_cast<T>(rows);
        Tensor<T>& dl = g.grad_buffer(l_id);
        for (std::size_t n = 0; n < rows; ++n)
          for (std::size_t c = 0; c < classes; ++c) {
            const T target = static_cast<int>(c) == lab[n] ? T{1} : T{0};
            const T p = prob[n * classes + c];
            // dropped classes have p == 0 and are never the target
            if (p != T{0} || target != T{0}) dl[n * classes + c] += d * (p - target);
          }
      });
}

/// Mean over rows of KL(teacher || student) with both softmaxes restricted to
/// kept classes. The teacher is a constant.
template <typename T>
Var<T> distillation_kl(Var<T> student, const Tensor<T>& teacher, const Tensor<T>& keep) {
  detail::require_rank("distillation_kl", student, 2);
  if (teacher.shape() != student.shape() || keep.shape() != student.shape())
    throw ShapeError("distillation_kl", "student " + shape_str(student.shape()) + ", teacher " +
                                            shape_str(teacher.shape()));
  const std::size_t rows = student.shape()[0], classes = student.shape()[1];
  const Tensor<T>& s = student.value();
  Tensor<T> ps(student.shape()), pt(student.shape());
  T total = 0;
  auto softmax_row = [&](const Tensor<T>& src, Tensor<T>& dst, std::size_t n, T& log_z, T& mx) {
    mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < classes; ++c)
      if (keep[n * classes + c] != T{0}) mx = std::max(mx, src[n * classes + c]);
    T z = 0;
    for (std::size_t c = 0; c < classes; ++c)
      if (keep[n * classes + c] != T{0}) {
        dst[n * classes + c] = std::exp(src[n * classes + c] - mx);
        z += dst[n * classes + c];
      }
    for (std::size_t c = 0; c < classes; ++c) dst[n * classes + c] /= z;
    log_z = std::log(z);
  };
  for (std::size_t n = 0; n < rows; ++n) {
    T lzs, mxs, lzt, mxt;
    softmax_row(s, ps, n, lzs, mxs);
    softmax_row(teacher, pt, n, lzt, mxt);
    for (std::size_t c = 0; c < classes; ++c) {
      if (keep[n * classes + c] == T{0} || pt[n * classes + c] == T{0}) continue;
      const T log_pt = teacher[n * classes + c] - mxt - lzt;
      const T log_ps = s[n * classes + c] - mxs - lzs;
      total += pt[n * classes + c] * (log_pt - log_ps);
    }
  }
  return student.graph->record(
      "distillation_kl", Tensor<T>::scalar(total / static_cast<T>(rows)), {student.id},
      [s_id = student.id, ps = std::move(ps), pt = std::move(pt), rows](Graph<T>& g, int self) {
        if (!g.requires_grad(s_id)) return;
        const T d = g.grad_buffer(self)[0] / static_cast<T>(rows);
        detail::accumulate(g, s_id, [&](std::size_t i) { return d * (ps[i] - pt[i]); });
      });
}

}  // namespace eas
