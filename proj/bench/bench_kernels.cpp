// Serial reference kernels against the OpenMP kernels on shapes taken from
// the default search space (32x32 input, 7x7 depthwise at max expansion).

#include <benchmark/benchmark.h>

#include <vector>

#include "eas/kernels.h"
#include "eas/rng.h"

namespace {

using eas::kernels::ConvGeometry;
using eas::kernels::Index;

std::vector<float> noise(Index n, std::uint64_t seed) {
  eas::Rng rng(seed);
  std::vector<float> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

ConvGeometry depthwise_geometry(const benchmark::State& state) {
  const Index k = state.range(0);
  return ConvGeometry{32, 96, 96, 32, 32, k, 1, k / 2};
}

template <bool Parallel>
void BM_DepthwiseForward(benchmark::State& state) {
  const ConvGeometry g = depthwise_geometry(state);
  const auto x = noise(g.batch * g.c_in * g.height * g.width, 1);
  const auto w = noise(g.c_in * g.kernel * g.kernel, 2);
  std::vector<float> y(static_cast<std::size_t>(g.batch * g.c_out * g.out_height() * g.out_width()));
  for (auto _ : state) {
    if constexpr (Parallel)
      eas::kernels::parallel::depthwise_forward(x.data(), w.data(), y.data(), g);
    else
      eas::kernels::serial::depthwise_forward(x.data(), w.data(), y.data(), g);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * g.batch * g.c_out * g.out_height() * g.out_width() *
                          g.kernel * g.kernel);
}

template <bool Parallel>
void BM_DepthwiseBackwardWeight(benchmark::State& state) {
  const ConvGeometry g = depthwise_geometry(state);
  const auto x = noise(g.batch * g.c_in * g.height * g.width, 1);
  const auto dy = noise(g.batch * g.c_out * g.out_height() * g.out_width(), 3);
  std::vector<float> dw(static_cast<std::size_t>(g.c_in * g.kernel * g.kernel));
  for (auto _ : state) {
    if constexpr (Parallel)
      eas::kernels::parallel::depthwise_backward_weight(dy.data(), x.data(), dw.data(), g);
    else
      eas::kernels::serial::depthwise_backward_weight(dy.data(), x.data(), dw.data(), g);
    benchmark::DoNotOptimize(dw.data());
  }
}

template <bool Parallel>
void BM_Pointwise(benchmark::State& state) {
  const Index batch = 32, c_in = state.range(0), c_out = 96, plane = 16 * 16;
  const auto x = noise(batch * c_in * plane, 4);
  const auto w = noise(c_out * c_in, 5);
  std::vector<float> y(static_cast<std::size_t>(batch * c_out * plane));
  for (auto _ : state) {
    if constexpr (Parallel)
      eas::kernels::parallel::pointwise_forward(x.data(), w.data(), y.data(), batch, c_in, c_out, plane);
    else
      eas::kernels::serial::pointwise_forward(x.data(), w.data(), y.data(), batch, c_in, c_out, plane);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * batch * c_in * c_out * plane);
}

template <bool Parallel>
void BM_Conv2dStem(benchmark::State& state) {
  const ConvGeometry g{32, 3, 16, 32, 32, 3, 1, 1};
  const auto x = noise(g.batch * g.c_in * g.height * g.width, 6);
  const auto w = noise(g.c_out * g.c_in * 9, 7);
  std::vector<float> y(static_cast<std::size_t>(g.batch * g.c_out * g.height * g.width));
  for (auto _ : state) {
    if constexpr (Parallel)
      eas::kernels::parallel::conv2d_forward(x.data(), w.data(), y.data(), g);
    else
      eas::kernels::serial::conv2d_forward(x.data(), w.data(), y.data(), g);
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_DepthwiseForward<false>)->Arg(3)->Arg(7)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DepthwiseForward<true>)->Arg(3)->Arg(7)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DepthwiseBackwardWeight<false>)->Arg(3)->Arg(7)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DepthwiseBackwardWeight<true>)->Arg(3)->Arg(7)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Pointwise<false>)->Arg(24)->Arg(96)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Pointwise<true>)->Arg(24)->Arg(96)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv2dStem<false>)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Conv2dStem<true>)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
