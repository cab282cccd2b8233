#include <gtest/gtest.h>

#include <vector>

#include "eas/kernels.h"
#include "eas/rng.h"

using namespace eas;
using namespace eas::kernels;

namespace {

std::vector<float> noise(Rng& rng, Index n) {
  std::vector<float> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

struct Case {
  ConvGeometry geo;
  bool depthwise;
};

std::vector<Case> geometries() {
  std::vector<Case> out;
  for (Index k : {1, 3, 5, 7})
    for (Index s : {1, 2})
      for (Index hw : {4, 7, 8}) {
        ConvGeometry g{2, 3, 5, hw, hw, k, s, k / 2};
        out.push_back({g, false});
        g.c_out = g.c_in = 6;
        out.push_back({g, true});
      }
  return out;
}

}  // namespace

TEST(KernelParity, ConvolutionsAreBitIdenticalAcrossCodePaths) {
  Rng rng(42);
  for (const auto& c : geometries()) {
    const ConvGeometry& g = c.geo;
    const Index x_n = g.batch * g.c_in * g.height * g.width;
    const Index y_n = g.batch * g.c_out * g.out_height() * g.out_width();
    const Index w_n = c.depthwise ? g.c_in * g.kernel * g.kernel : g.c_out * g.c_in * g.kernel * g.kernel;
    auto x = noise(rng, x_n), w = noise(rng, w_n), dy = noise(rng, y_n);
    // Post-activation tensors hold many exact zeros of both signs.
    for (std::size_t i = 0; i < x.size(); i += 3) x[i] = (i % 2) ? -0.0f : 0.0f;
    for (std::size_t i = 1; i < dy.size(); i += 4) dy[i] = -0.0f;
    std::vector<float> ys(y_n), yp(y_n), dxs(x_n), dxp(x_n), dws(w_n), dwp(w_n);
    if (c.depthwise) {
      serial::depthwise_forward(x.data(), w.data(), ys.data(), g);
      parallel::depthwise_forward(x.data(), w.data(), yp.data(), g);
      serial::depthwise_backward_data(dy.data(), w.data(), dxs.data(), g);
      parallel::depthwise_backward_data(dy.data(), w.data(), dxp.data(), g);
      serial::depthwise_backward_weight(dy.data(), x.data(), dws.data(), g);
      parallel::depthwise_backward_weight(dy.data(), x.data(), dwp.data(), g);
    } else {
      serial::conv2d_forward(x.data(), w.data(), ys.data(), g);
      parallel::conv2d_forward(x.data(), w.data(), yp.data(), g);
      serial::conv2d_backward_data(dy.data(), w.data(), dxs.data(), g);
      parallel::conv2d_backward_data(dy.data(), w.data(), dxp.data(), g);
      serial::conv2d_backward_weight(dy.data(), x.data(), dws.data(), g);
      parallel::conv2d_backward_weight(dy.data(), x.data(), dwp.data(), g);
    }
    const auto label = std::string(c.depthwise ? "dw" : "conv") + " k=" + std::to_string(g.kernel) +
                       " s=" + std::to_string(g.stride) + " hw=" + std::to_string(g.height);
    EXPECT_EQ(ys, yp) << label;
    EXPECT_EQ(dxs, dxp) << label;
    EXPECT_EQ(dws, dwp) << label;
  }
}

TEST(KernelParity, PointwiseIsBitIdenticalAcrossCodePaths) {
  Rng rng(7);
  for (Index plane : {1, 9, 64})
    for (Index ci : {1, 5, 16, 33})
      for (Index co : {1, 7, 20, 37}) {
        const Index batch = 3;
        const auto x = noise(rng, batch * ci * plane), w = noise(rng, co * ci),
                   dy = noise(rng, batch * co * plane);
        std::vector<float> ys(batch * co * plane), yp(ys.size()), dxs(x.size()), dxp(x.size()),
            dws(w.size()), dwp(w.size());
        serial::pointwise_forward(x.data(), w.data(), ys.data(), batch, ci, co, plane);
        parallel::pointwise_forward(x.data(), w.data(), yp.data(), batch, ci, co, plane);
        serial::pointwise_backward_data(dy.data(), w.data(), dxs.data(), batch, ci, co, plane);
        parallel::pointwise_backward_data(dy.data(), w.data(), dxp.data(), batch, ci, co, plane);
        serial::pointwise_backward_weight(dy.data(), x.data(), dws.data(), batch, ci, co, plane);
        parallel::pointwise_backward_weight(dy.data(), x.data(), dwp.data(), batch, ci, co, plane);
        EXPECT_EQ(ys, yp);
        EXPECT_EQ(dxs, dxp);
        EXPECT_EQ(dws, dwp);
      }
}

TEST(KernelParity, MatmulVariantsAreBitIdenticalAcrossCodePaths) {
  Rng rng(9);
  for (Index m : {1, 4, 13})
    for (Index k : {1, 6, 32})
      for (Index n : {1, 3, 17}) {
        const auto a = noise(rng, m * k), b = noise(rng, k * n), bt = noise(rng, n * k),
                   at = noise(rng, k * m);
        std::vector<float> s(m * n), p(m * n);
        serial::matmul_nn(a.data(), b.data(), s.data(), m, k, n);
        parallel::matmul_nn(a.data(), b.data(), p.data(), m, k, n);
        EXPECT_EQ(s, p);
        serial::matmul_nt(a.data(), bt.data(), s.data(), m, k, n);
        parallel::matmul_nt(a.data(), bt.data(), p.data(), m, k, n);
        EXPECT_EQ(s, p);
        serial::matmul_tn(at.data(), b.data(), s.data(), m, k, n);
        parallel::matmul_tn(at.data(), b.data(), p.data(), m, k, n);
        EXPECT_EQ(s, p);
      }
}

TEST(KernelReference, ThreeByThreeConvolutionOnTinyInput) {
  // 1 channel 3x3 input of ones, all-ones 3x3 kernel, pad 1: corner sees 4
  // taps, edge 6, center 9.
  ConvGeometry g{1, 1, 1, 3, 3, 3, 1, 1};
  std::vector<float> x(9, 1.0f), w(9, 1.0f), y(9);
  serial::conv2d_forward(x.data(), w.data(), y.data(), g);
  EXPECT_EQ(y, (std::vector<float>{4, 6, 4, 6, 9, 6, 4, 6, 4}));
}
