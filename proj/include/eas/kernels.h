#pragma once

// Compute kernels behind the graph operations. Each kernel exists twice:
//   serial::   one output element at a time, straight from the definition.
//   parallel:: loop-reordered for contiguous inner loops, OpenMP over planes.
// Both accumulate every output element in the same term order, so with
// -ffp-contract=off their results are bit-identical. The serial versions are
// the test reference; the graph always dispatches to parallel::.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace eas::kernels {

using Index = std::int64_t;

struct ConvGeometry {
  Index batch = 1;
  Index c_in = 1;
  Index c_out = 1;
  Index height = 1;
  Index width = 1;
  Index kernel = 1;
  Index stride = 1;
  Index pad = 0;

  Index out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  Index out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};

namespace serial {

// y[M,N] = a[M,K] * b[K,N]
template <typename T>
void matmul_nn(const T* a, const T* b, T* y, Index m, Index k, Index n) {
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) {
      T s = 0;
      for (Index p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      y[i * n + j] = s;
    }
}

// y[M,N] = a[M,K] * b[N,K]^T
template <typename T>
void matmul_nt(const T* a, const T* b, T* y, Index m, Index k, Index n) {
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) {
      T s = 0;
      for (Index p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      y[i * n + j] = s;
    }
}

// y[M,N] = a[K,M]^T * b[K,N]
template <typename T>
void matmul_tn(const T* a, const T* b, T* y, Index m, Index k, Index n) {
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) {
      T s = 0;
      for (Index p = 0; p < k; ++p) s += a[p * m + i] * b[p * n + j];
      y[i * n + j] = s;
    }
}

// Dense convolution, NCHW, weights [c_out, c_in, k, k].
template <typename T>
void conv2d_forward(const T* x, const T* w, T* y, const ConvGeometry& g) {
  const Index oh_n = g.out_height(), ow_n = g.out_width();
  for (Index n = 0; n < g.batch; ++n)
    for (Index co = 0; co < g.c_out; ++co)
      for (Index oh = 0; oh < oh_n; ++oh)
        for (Index ow = 0; ow < ow_n; ++ow) {
          T s = 0;
          for (Index ci = 0; ci < g.c_in; ++ci)
            for (Index kh = 0; kh < g.kernel; ++kh)
              for (Index kw = 0; kw < g.kernel; ++kw) {
                const Index ih = oh * g.stride + kh - g.pad;
                const Index iw = ow * g.stride + kw - g.pad;
                if (ih < 0 || ih >= g.height || iw < 0 || iw >= g.width) continue;
                s += w[((co * g.c_in + ci) * g.kernel + kh) * g.kernel + kw] *
                     x[((n * g.c_in + ci) * g.height + ih) * g.width + iw];
              }
          y[((n * g.c_out + co) * oh_n + oh) * ow_n + ow] = s;
        }
}

template <typename T>
void conv2d_backward_data(const T* dy, const T* w, T* dx, const ConvGeometry& g) {
  const Index oh_n = g.out_height(), ow_n = g.out_width();
  for (Index n = 0; n < g.batch; ++n)
    for (Index ci = 0; ci < g.c_in; ++ci)
      for (Index ih = 0; ih < g.height; ++ih)
        for (Index iw = 0; iw < g.width; ++iw) {
          T s = 0;
          for (Index co = 0; co < g.c_out; ++co)
            for (Index kh = 0; kh < g.kernel; ++kh)
              for (Index kw = 0; kw < g.kernel; ++kw) {
                const Index th = ih + g.pad - kh, tw = iw + g.pad - kw;
                if (th < 0 || tw < 0 || th % g.stride || tw % g.stride) continue;
                const Index oh = th / g.stride, ow = tw / g.stride;
                if (oh >= oh_n || ow >= ow_n) continue;
                s += w[((co * g.c_in + ci) * g.kernel + kh) * g.kernel + kw] *
                     dy[((n * g.c_out + co) * oh_n + oh) * ow_n + ow];
              }
          dx[((n * g.c_in + ci) * g.height + ih) * g.width + iw] = s;
        }
}

template <typename T>
void conv2d_backward_weight(const T* dy, const T* x, T* dw, const ConvGeometry& g) {
  const Index oh_n = g.out_height(), ow_n = g.out_width();
  for (Index co = 0; co < g.c_out; ++co)
    for (Index ci = 0; ci < g.c_in; ++ci)
      for (Index kh = 0; kh < g.kernel; ++kh)
        for (Index kw = 0; kw < g.kernel; ++kw) {
          T s = 0;
          for (Index n = 0; n < g.batch; ++n)
            for (Index oh = 0; oh < oh_n; ++oh)
              for (Index ow = 0; ow < ow_n; ++ow) {
                const Index ih = oh * g.stride + kh - g.pad;
                const Index iw = ow * g.stride + kw - g.pad;
                if (ih < 0 || ih >= g.height || iw < 0 || iw >= g.width) continue;
                s += dy[((n * g.c_out + co) * oh_n + oh) * ow_n + ow] *
                     x[((n * g.c_in + ci) * g.height + ih) * g.width + iw];
              }
          dw[((co * g.c_in + ci) * g.kernel + kh) * g.kernel + kw] = s;
        }
}

// Depthwise convolution, weights [c, k, k]; c_in == c_out.
template <typename T>
void depthwise_forward(const T* x, const T* w, T* y, const ConvGeometry& g) {
  const Index oh_n = g.out_height(), ow_n = g.out_width();
  const Index kk = g.kernel * g.kernel;
  for (Index n = 0; n < g.batch; ++n)
    for (Index c = 0; c < g.c_in; ++c)
      for (Index oh = 0; oh < oh_n; ++oh)
        for (Index ow = 0; ow < ow_n; ++ow) {
          T s = 0;
          for (Index kh = 0; kh < g.kernel; ++kh)
            for (Index kw = 0; kw < g.kernel; ++kw) {
              const Index ih = oh * g.stride + kh - g.pad;
              const Index iw = ow * g.stride + kw - g.pad;
              if (ih < 0 || ih >= g.height || iw < 0 || iw >= g.width) continue;
              s += w[c * kk + kh * g.kernel + kw] *
                   x[((n * g.c_in + c) * g.height + ih) * g.width + iw];
            }
          y[((n * g.c_in + c) * oh_n + oh) * ow_n + ow] = s;
        }
}

template <typename T>
void depthwise_backward_data(const T* dy, const T* w, T* dx, const ConvGeometry& g) {
  const Index oh_n = g.out_height(), ow_n = g.out_width();
  const Index kk = g.kernel * g.kernel;
  for (Index n = 0; n < g.batch; ++n)
    for (Index c = 0; c < g.c_in; ++c)
      for (Index ih = 0; ih < g.height; ++ih)
        for (Index iw = 0; iw < g.width; ++iw) {
          T s = 0;
          for (Index kh = 0; kh < g.kernel; ++kh)
            for (Index kw = 0; kw < g.kernel; ++kw) {
              const Index th = ih + g.pad - kh, tw = iw + g.pad - kw;
              if (th < 0 || tw < 0 || th % g.stride || tw % g.stride) continue;
              const Index oh = th / g.stride, ow = tw / g.stride;
              if (oh >= oh_n || ow >= ow_n) continue;
              s += w[c * kk + kh * g.kernel + kw] *
                   dy[((n * g.c_in + c) * oh_n + oh) * ow_n + ow];
            }
          dx[((n * g.c_in + c) * g.height + ih) * g.width + iw] = s;
        }
}

template <typename T>
void depthwise_backward_weight(const T* dy, const T* x, T* dw, const ConvGeometry& g) {
  const Index oh_n = g.out_height(), ow_n = g.out_width();
  const Index kk = g.kernel * g.kernel;
  for (Index c = 0; c < g.c_in; ++c)
    for (Index kh = 0; kh < g.kernel; ++kh)
      for (Index kw = 0; kw < g.kernel; ++kw) {
        T s = 0;
        for (Index n = 0; n < g.batch; ++n)
          for (Index oh = 0; oh < oh_n; ++oh)
            for (Index ow = 0; ow < ow_n; ++ow) {
              const Index ih = oh * g.stride + kh - g.pad;
              const Index iw = ow * g.stride + kw - g.pad;
              if (ih < 0 || ih >= g.height || iw < 0 || iw >= g.width) continue;
              s += dy[((n * g.c_in + c) * oh_n + oh) * ow_n + ow] *
                   x[((n * g.c_in + c) * g.height + ih) * g.width + iw];
            }
        dw[c * kk + kh * g.kernel + kw] = s;
      }
}

// Pointwise (1x1) convolution over `plane` spatial positions, weights [c_out, c_in].
template <typename T>
void pointwise_forward(const T* x, const T* w, T* y, Index batch, Index c_in, Index c_out,
                       Index plane) {
  for (Index n = 0; n < batch; ++n)
    for (Index co = 0; co < c_out; ++co)
      for (Index p = 0; p < plane; ++p) {
        T s = 0;
        for (Index ci = 0; ci < c_in; ++ci)
          s += w[co * c_in + ci] * x[(n * c_in + ci) * plane + p];
        y[(n * c_out + co) * plane + p] = s;
      }
}

template <typename T>
void pointwise_backward_data(const T* dy, const T* w, T* dx, Index batch, Index c_in,
                             Index c_out, Index plane) {
  for (Index n = 0; n < batch; ++n)
    for (Index ci = 0; ci < c_in; ++ci)
      for (Index p = 0; p < plane; ++p) {
        T s = 0;
        for (Index co = 0; co < c_out; ++co)
          s += w[co * c_in + ci] * dy[(n * c_out + co) * plane + p];
        dx[(n * c_in + ci) * plane + p] = s;
      }
}

template <typename T>
void pointwise_backward_weight(const T* dy, const T* x, T* dw, Index batch, Index c_in,
                               Index c_out, Index plane) {
  for (Index co = 0; co < c_out; ++co)
    for (Index ci = 0; ci < c_in; ++ci) {
      T s = 0;
      for (Index n = 0; n < batch; ++n)
        for (Index p = 0; p < plane; ++p)
          s += dy[(n * c_out + co) * plane + p] * x[(n * c_in + ci) * plane + p];
      dw[co * c_in + ci] = s;
    }
}

}  // namespace serial

namespace parallel {

template <typename T>
void matmul_nn(const T* a, const T* b, T* y, Index m, Index k, Index n) {
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
  for (Index i = 0; i < m; ++i) {
    T* row = y + i * n;
    for (Index j = 0; j < n; ++j) row[j] = 0;
    for (Index p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* brow = b + p * n;
      for (Index j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

template <typename T>
void matmul_nt(const T* a, const T* b, T* y, Index m, Index k, Index n) {
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
  for (Index i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (Index j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T s = 0;
      for (Index p = 0; p < k; ++p) s += arow[p] * brow[p];
      y[i * n + j] = s;
    }
  }
}

template <typename T>
void matmul_tn(const T* a, const T* b, T* y, Index m, Index k, Index n) {
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
  for (Index i = 0; i < m; ++i) {
    T* row = y + i * n;
    for (Index j = 0; j < n; ++j) row[j] = 0;
    for (Index p = 0; p < k; ++p) {
      const T av = a[p * m + i];
      const T* brow = b + p * n;
      for (Index j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

namespace detail {

// Valid output range [lo, hi) along one axis for kernel tap `tap`.
inline void valid_range(Index tap, Index stride, Index pad, Index in_size, Index out_size,
                        Index& lo, Index& hi) {
  // need 0 <= o*stride + tap - pad < in_size
  const Index first = pad - tap;
  lo = first <= 0 ? 0 : (first + stride - 1) / stride;
  const Index last = in_size - 1 + pad - tap;  // o*stride <= last
  hi = last < 0 ? 0 : last / stride + 1;
  if (hi > out_size) hi = out_size;
  if (lo > hi) lo = hi;
}

// Accumulates one k x k filter into an output plane: y += w (*) x.
template <typename T>
inline void accumulate_plane(const T* x, const T* w, T* y, const ConvGeometry& g) {
  const Index oh_n = g.out_height(), ow_n = g.out_width();
  for (Index kh = 0; kh < g.kernel; ++kh) {
    Index oh_lo, oh_hi;
    valid_range(kh, g.stride, g.pad, g.height, oh_n, oh_lo, oh_hi);
    for (Index kw = 0; kw < g.kernel; ++kw) {
      Index ow_lo, ow_hi;
      valid_range(kw, g.stride, g.pad, g.width, ow_n, ow_lo, ow_hi);
      const T wv = w[kh * g.kernel + kw];
      for (Index oh = oh_lo; oh < oh_hi; ++oh) {
        const T* xrow = x + (oh * g.stride + kh - g.pad) * g.width + (kw - g.pad);
        T* yrow = y + oh * ow_n;
        if (g.stride == 1) {
          for (Index ow = ow_lo; ow < ow_hi; ++ow) yrow[ow] += wv * xrow[ow];
        } else {
          for (Index ow = ow_lo; ow < ow_hi; ++ow) yrow[ow] += wv * xrow[ow * g.stride];
        }
      }
    }
  }
}

// Scatters one filter's contribution back into an input-gradient plane.
template <typename T>
inline void scatter_plane(const T* dy, const T* w, T* dx, const ConvGeometry& g) {
  const Index oh_n = g.out_height(), ow_n = g.out_width();
  // Per input element, contributions must arrive in (kh, kw) order. A tap
  // (kh, kw) touches each input element at most once, so iterating taps in
  // the outer loops preserves that order.
  for (Index kh = 0; kh < g.kernel; ++kh) {
    Index oh_lo, oh_hi;
    valid_range(kh, g.stride, g.pad, g.height, oh_n, oh_lo, oh_hi);
    for (Index kw = 0; kw < g.kernel; ++kw) {
      Index ow_lo, ow_hi;
      valid_range(kw, g.stride, g.pad, g.width, ow_n, ow_lo, ow_hi);
      const T wv = w[kh * g.kernel + kw];
      for (Index oh = oh_lo; oh < oh_hi; ++oh) {
        T* xrow = dx + (oh * g.stride + kh - g.pad) * g.width + (kw - g.pad);
        const T* yrow = dy + oh * ow_n;
        if (g.stride == 1) {
          for (Index ow = ow_lo; ow < ow_hi; ++ow) xrow[ow] += wv * yrow[ow];
        } else {
          for (Index ow = ow_lo; ow < ow_hi; ++ow) xrow[ow * g.stride] += wv * yrow[ow];
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
void conv2d_forward(const T* x, const T* w, T* y, const ConvGeometry& g) {
  const Index out_plane = g.out_height() * g.out_width();
  const Index in_plane = g.height * g.width;
  const Index kk = g.kernel * g.kernel;
#pragma omp parallel for collapse(2) schedule(static)
  for (Index n = 0; n < g.batch; ++n)
    for (Index co = 0; co < g.c_out; ++co) {
      T* yp = y + (n * g.c_out + co) * out_plane;
      for (Index i = 0; i < out_plane; ++i) yp[i] = 0;
      for (Index ci = 0; ci < g.c_in; ++ci)
        detail::accumulate_plane(x + (n * g.c_in + ci) * in_plane,
                                 w + (co * g.c_in + ci) * kk, yp, g);
    }
}

template <typename T>
void conv2d_backward_data(const T* dy, const T* w, T* dx, const ConvGeometry& g) {
  const Index out_plane = g.out_height() * g.out_width();
  const Index in_plane = g.height * g.width;
  const Index kk = g.kernel * g.kernel;
#pragma omp parallel for collapse(2) schedule(static)
  for (Index n = 0; n < g.batch; ++n)
    for (Index ci = 0; ci < g.c_in; ++ci) {
      T* xp = dx + (n * g.c_in + ci) * in_plane;
      for (Index i = 0; i < in_plane; ++i) xp[i] = 0;
      for (Index co = 0; co < g.c_out; ++co)
        detail::scatter_plane(dy + (n * g.c_out + co) * out_plane,
                              w + (co * g.c_in + ci) * kk, xp, g);
    }
}

template <typename T>
void conv2d_backward_weight(const T* dy, const T* x, T* dw, const ConvGeometry& g) {
  const Index out_plane = g.out_height() * g.out_width();
  const Index in_plane = g.height * g.width;
#pragma omp parallel for collapse(2) schedule(static)
  for (Index co = 0; co < g.c_out; ++co)
    for (Index ci = 0; ci < g.c_in; ++ci)
      for (Index kh = 0; kh < g.kernel; ++kh)
        for (Index kw = 0; kw < g.kernel; ++kw) {
          T s = 0;
          for (Index n = 0; n < g.batch; ++n) {
            // Partial sums per sample would change the association; fold
            // each sample's terms straight into s.
            const T* dyp = dy + (n * g.c_out + co) * out_plane;
            const T* xp = x + (n * g.c_in + ci) * in_plane;
            Index oh_lo, oh_hi, ow_lo, ow_hi;
            detail::valid_range(kh, g.stride, g.pad, g.height, g.out_height(), oh_lo, oh_hi);
            detail::valid_range(kw, g.stride, g.pad, g.width, g.out_width(), ow_lo, ow_hi);
            for (Index oh = oh_lo; oh < oh_hi; ++oh) {
              const T* xrow = xp + (oh * g.stride + kh - g.pad) * g.width + (kw - g.pad);
              const T* yrow = dyp + oh * g.out_width();
              for (Index ow = ow_lo; ow < ow_hi; ++ow) s += yrow[ow] * xrow[ow * g.stride];
            }
          }
          dw[((co * g.c_in + ci) * g.kernel + kh) * g.kernel + kw] = s;
        }
}

namespace detail {

// Zero-padded copy of one plane: rows [-top, h+bottom) and the same columns.
// Extra zero terms never change a sum that started at +0, so gathering from
// the padded plane keeps results identical to the skip-the-border reference.
template <typename T>
inline void pad_plane(const T* src, Index h, Index w, Index lo, Index hi, std::vector<T>& out) {
  const Index wp = w + lo + hi;
  out.assign(static_cast<std::size_t>((h + lo + hi) * wp), T{0});
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c) out[static_cast<std::size_t>((r + lo) * wp + c + lo)] = src[r * w + c];
}

// acc[i] += sum over kw of w[kw] * d[i - kw], kw ascending.
template <typename T, Index K>
inline void row_taps_k(T* acc, const T* d, const T* w, Index n, Index k_rt) {
  const Index k = K > 0 ? K : k_rt;
  for (Index i = 0; i < n; ++i) {
    T a = acc[i];
    for (Index kw = 0; kw < k; ++kw) a += w[kw] * d[i - kw];
    acc[i] = a;
  }
}

template <typename T>
inline void row_taps(T* acc, const T* d, const T* w, Index n, Index k) {
  switch (k) {
    case 3: row_taps_k<T, 3>(acc, d, w, n, k); break;
    case 5: row_taps_k<T, 5>(acc, d, w, n, k); break;
    case 7: row_taps_k<T, 7>(acc, d, w, n, k); break;
    default: row_taps_k<T, 0>(acc, d, w, n, k);
  }
}

// y[oh][ow] = sum over (kh, kw) of w[kh][kw] * xp[oh*s + kh][ow*s + kw].
// `acc` holds one output row; each kernel row is folded in with its k taps
// unrolled so the loop over ow vectorizes.
template <typename T, Index K>
inline void gather_plane(const T* xp, Index wp, const T* w, T* y, Index oh_n, Index ow_n, Index s,
                         Index k_rt) {
  const Index k = K > 0 ? K : k_rt;
  for (Index oh = 0; oh < oh_n; ++oh) {
    T* acc = y + oh * ow_n;
    for (Index ow = 0; ow < ow_n; ++ow) acc[ow] = 0;
    for (Index kh = 0; kh < k; ++kh) {
      const T* xr = xp + (oh * s + kh) * wp;
      const T* wr = w + kh * k;
      if (s == 1) {
        for (Index ow = 0; ow < ow_n; ++ow) {
          T a = acc[ow];
          for (Index kw = 0; kw < k; ++kw) a += wr[kw] * xr[ow + kw];
          acc[ow] = a;
        }
      } else {
        for (Index ow = 0; ow < ow_n; ++ow) {
          T a = acc[ow];
          for (Index kw = 0; kw < k; ++kw) a += wr[kw] * xr[ow * s + kw];
          acc[ow] = a;
        }
      }
    }
  }
}

template <typename T>
inline void gather_plane_any(const T* xp, Index wp, const T* w, T* y, Index oh_n, Index ow_n, Index s,
                             Index k) {
  switch (k) {
    case 3: gather_plane<T, 3>(xp, wp, w, y, oh_n, ow_n, s, k); break;
    case 5: gather_plane<T, 5>(xp, wp, w, y, oh_n, ow_n, s, k); break;
    case 7: gather_plane<T, 7>(xp, wp, w, y, oh_n, ow_n, s, k); break;
    default: gather_plane<T, 0>(xp, wp, w, y, oh_n, ow_n, s, k);
  }
}

// dw[kh][kw] = sum over (oh, ow) of dy[oh][ow] * xp[oh*s + kh][ow*s + kw],
// added onto dw in (oh, ow) order; the taps form independent chains.
template <typename T, Index K>
inline void weight_plane(const T* dy, const T* xp, Index wp, T* dw, Index oh_n, Index ow_n, Index s,
                         Index k_rt) {
  const Index k = K > 0 ? K : k_rt;
  T acc[K > 0 ? K * K : 1];
  T* a = acc;
  std::vector<T> dyn;
  if (K == 0) {
    dyn.assign(dw, dw + k * k);
    a = dyn.data();
  } else {
    for (Index t = 0; t < k * k; ++t) a[t] = dw[t];
  }
  for (Index oh = 0; oh < oh_n; ++oh) {
    const T* base = xp + oh * s * wp;
    for (Index ow = 0; ow < ow_n; ++ow) {
      const T d = dy[oh * ow_n + ow];
      const T* xo = base + ow * s;
      for (Index kh = 0; kh < k; ++kh)
        for (Index kw = 0; kw < k; ++kw) a[kh * k + kw] += d * xo[kh * wp + kw];
    }
  }
  for (Index t = 0; t < k * k; ++t) dw[t] = a[t];
}

template <typename T>
inline void weight_plane_any(const T* dy, const T* xp, Index wp, T* dw, Index oh_n, Index ow_n, Index s,
                             Index k) {
  switch (k) {
    case 3: weight_plane<T, 3>(dy, xp, wp, dw, oh_n, ow_n, s, k); break;
    case 5: weight_plane<T, 5>(dy, xp, wp, dw, oh_n, ow_n, s, k); break;
    case 7: weight_plane<T, 7>(dy, xp, wp, dw, oh_n, ow_n, s, k); break;
    default: weight_plane<T, 0>(dy, xp, wp, dw, oh_n, ow_n, s, k);
  }
}

}  // namespace detail

template <typename T>
void depthwise_forward(const T* x, const T* w, T* y, const ConvGeometry& g) {
  const Index oh_n = g.out_height(), ow_n = g.out_width();
  const Index in_plane = g.height * g.width;
  const Index kk = g.kernel * g.kernel;
  // Bottom/right padding large enough that every gathered tap is in bounds.
  const Index hi_h = std::max<Index>(0, (oh_n - 1) * g.stride + g.kernel - g.pad - g.height);
  const Index hi_w = std::max<Index>(0, (ow_n - 1) * g.stride + g.kernel - g.pad - g.width);
  const Index hi = std::max(hi_h, hi_w);
#pragma omp parallel
  {
    std::vector<T> xp;
#pragma omp for collapse(2) schedule(static)
    for (Index n = 0; n < g.batch; ++n)
      for (Index c = 0; c < g.c_in; ++c) {
        detail::pad_plane(x + (n * g.c_in + c) * in_plane, g.height, g.width, g.pad, hi, xp);
        detail::gather_plane_any(xp.data(), g.width + g.pad + hi, w + c * kk,
                                 y + (n * g.c_in + c) * oh_n * ow_n, oh_n, ow_n, g.stride, g.kernel);
      }
  }
}

template <typename T>
void depthwise_backward_data(const T* dy, const T* w, T* dx, const ConvGeometry& g) {
  const Index oh_n = g.out_height(), ow_n = g.out_width();
  const Index k = g.kernel, kk = k * k;
  // Input gradient as a stride-1 gather over a dilated, padded copy of dy:
  // entry (r, c) holds dy at output position ((r - lo) / s, (c - lo) / s) when
  // that divides evenly and lies inside the output, zero otherwise. The
  // flipped filter then visits taps in the same (kh, kw) order as the
  // reference.
  const Index lo = k - 1 - g.pad;
  const Index rows = g.height + k - 1, cols = g.width + k - 1;
#pragma omp parallel
  {
    std::vector<T> d(static_cast<std::size_t>(rows * cols));
#pragma omp for collapse(2) schedule(static)
    for (Index n = 0; n < g.batch; ++n)
      for (Index c = 0; c < g.c_in; ++c) {
        const T* dyp = dy + (n * g.c_in + c) * oh_n * ow_n;
        std::fill(d.begin(), d.end(), T{0});
        for (Index r = 0; r < rows; ++r) {
          const Index t = r - lo;
          if (t < 0 || t % g.stride) continue;
          const Index oh = t / g.stride;
          if (oh >= oh_n) continue;
          for (Index q = 0; q < cols; ++q) {
            const Index u = q - lo;
            if (u < 0 || u % g.stride) continue;
            const Index ow = u / g.stride;
            if (ow >= ow_n) continue;
            d[static_cast<std::size_t>(r * cols + q)] = dyp[oh * ow_n + ow];
          }
        }
        // dx[ih][iw] = sum over (kh, kw) of w[kh][kw] * d[ih + k-1-kh][iw + k-1-kw]
        // in (kh, kw) order. Reversing both d and w turns this into a forward
        // gather, so reverse d's rows and columns while copying.
        T* xp = dx + (n * g.c_in + c) * g.height * g.width;
        const T* wc = w + c * kk;
        for (Index ih = 0; ih < g.height; ++ih) {
          T* acc = xp + ih * g.width;
          for (Index iw = 0; iw < g.width; ++iw) acc[iw] = 0;
          for (Index kh = 0; kh < k; ++kh) {
            const T* dr = d.data() + (ih + k - 1 - kh) * cols + (k - 1);
            const T* wr = wc + kh * k;
            detail::row_taps(acc, dr, wr, g.width, k);
          }
        }
      }
  }
}

template <typename T>
void depthwise_backward_weight(const T* dy, const T* x, T* dw, const ConvGeometry& g) {
  const Index oh_n = g.out_height(), ow_n = g.out_width();
  const Index in_plane = g.height * g.width;
  const Index kk = g.kernel * g.kernel;
  const Index hi_h = std::max<Index>(0, (oh_n - 1) * g.stride + g.kernel - g.pad - g.height);
  const Index hi_w = std::max<Index>(0, (ow_n - 1) * g.stride + g.kernel - g.pad - g.width);
  const Index hi = std::max(hi_h, hi_w);
#pragma omp parallel
  {
    std::vector<T> xp;
#pragma omp for schedule(static)
    for (Index c = 0; c < g.c_in; ++c) {
      T* dwc = dw + c * kk;
      for (Index t = 0; t < kk; ++t) dwc[t] = 0;
      for (Index n = 0; n < g.batch; ++n) {
        detail::pad_plane(x + (n * g.c_in + c) * in_plane, g.height, g.width, g.pad, hi, xp);
        detail::weight_plane_any(dy + (n * g.c_in + c) * oh_n * ow_n, xp.data(), g.width + g.pad + hi, dwc,
                                 oh_n, ow_n, g.stride, g.kernel);
      }
    }
  }
}

namespace detail {

// out[r][p] = sum over j of coef(r, j) * in[j][p] for `rows` consecutive
// output rows, four at a time so each input row is loaded once per group.
template <typename T, typename Coef>
inline void combine_rows(const T* in, T* out, Index rows, Index terms, Index plane, Coef coef) {
  Index r = 0;
  for (; r + 4 <= rows; r += 4) {
    T* o0 = out + r * plane;
    T* o1 = o0 + plane;
    T* o2 = o1 + plane;
    T* o3 = o2 + plane;
    for (Index p = 0; p < plane; ++p) o0[p] = o1[p] = o2[p] = o3[p] = 0;
    for (Index j = 0; j < terms; ++j) {
      const T w0 = coef(r, j), w1 = coef(r + 1, j), w2 = coef(r + 2, j), w3 = coef(r + 3, j);
      const T* ip = in + j * plane;
      for (Index p = 0; p < plane; ++p) {
        const T v = ip[p];
        o0[p] += w0 * v;
        o1[p] += w1 * v;
        o2[p] += w2 * v;
        o3[p] += w3 * v;
      }
    }
  }
  for (; r < rows; ++r) {
    T* o = out + r * plane;
    for (Index p = 0; p < plane; ++p) o[p] = 0;
    for (Index j = 0; j < terms; ++j) {
      const T wv = coef(r, j);
      const T* ip = in + j * plane;
      for (Index p = 0; p < plane; ++p) o[p] += wv * ip[p];
    }
  }
}

}  // namespace detail

template <typename T>
void pointwise_forward(const T* x, const T* w, T* y, Index batch, Index c_in, Index c_out,
                       Index plane) {
  const Index groups = (c_out + 15) / 16;
#pragma omp parallel for collapse(2) schedule(static)
  for (Index n = 0; n < batch; ++n)
    for (Index gi = 0; gi < groups; ++gi) {
      const Index co0 = gi * 16, rows = std::min<Index>(16, c_out - co0);
      detail::combine_rows(x + n * c_in * plane, y + (n * c_out + co0) * plane, rows, c_in, plane,
                           [&](Index r, Index j) { return w[(co0 + r) * c_in + j]; });
    }
}

template <typename T>
void pointwise_backward_data(const T* dy, const T* w, T* dx, Index batch, Index c_in,
                             Index c_out, Index plane) {
  const Index groups = (c_in + 15) / 16;
#pragma omp parallel for collapse(2) schedule(static)
  for (Index n = 0; n < batch; ++n)
    for (Index gi = 0; gi < groups; ++gi) {
      const Index ci0 = gi * 16, rows = std::min<Index>(16, c_in - ci0);
      detail::combine_rows(dy + n * c_out * plane, dx + (n * c_in + ci0) * plane, rows, c_out, plane,
                           [&](Index r, Index j) { return w[j * c_in + ci0 + r]; });
    }
}

template <typename T>
void pointwise_backward_weight(const T* dy, const T* x, T* dw, Index batch, Index c_in,
                               Index c_out, Index plane) {
  // Channel-minor copy of x so the inner loop runs over contiguous c_in.
  std::vector<T> xt(static_cast<std::size_t>(batch * plane * c_in));
#pragma omp parallel for schedule(static)
  for (Index n = 0; n < batch; ++n)
    for (Index ci = 0; ci < c_in; ++ci)
      for (Index p = 0; p < plane; ++p)
        xt[(n * plane + p) * c_in + ci] = x[(n * c_in + ci) * plane + p];
#pragma omp parallel for schedule(static)
  for (Index co = 0; co < c_out; ++co) {
    T* row = dw + co * c_in;
    for (Index ci = 0; ci < c_in; ++ci) row[ci] = 0;
    for (Index n = 0; n < batch; ++n)
      for (Index p = 0; p < plane; ++p) {
        const T d = dy[(n * c_out + co) * plane + p];
        const T* xr = xt.data() + (n * plane + p) * c_in;
        for (Index ci = 0; ci < c_in; ++ci) row[ci] += d * xr[ci];
      }
  }
}

}  // namespace parallel

}  // namespace eas::kernels
