#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <filesystem>

#include "eas/gradcheck.h"
#include "eas/supernet.h"

using namespace eas;

namespace {

SearchSpace small_space() {
  SearchSpace s;
  s.units = {UnitConfig{4, 2, 8, 1}, UnitConfig{4, 2, 12, 2}, UnitConfig{4, 2, 16, 2}};
  s.stem.channels = 8;
  s.input_height = s.input_width = 8;
  s.head = {16, 6};
  s.validate();
  return s;
}

// Freshly created nets start with unit scales and zero biases; jitter every
// tensor so slicing mistakes cannot hide behind symmetric values.
Supernet jittered(const SearchSpace& s, std::uint64_t seed) {
  Rng rng(seed);
  Supernet net = Supernet::create(s, rng);
  for (auto& [name, t] : net.weights)
    for (auto& v : t.values()) v += static_cast<float>(0.1 * rng.normal());
  return net;
}

TensorF batch(const SearchSpace& s, std::size_t n, Rng& rng) {
  TensorF x(Shape{n, static_cast<std::size_t>(s.input_channels), static_cast<std::size_t>(s.input_height),
                  static_cast<std::size_t>(s.input_width)});
  for (auto& v : x.values()) v = static_cast<float>(rng.normal());
  return x;
}

float max_abs_diff(const TensorF& a, const TensorF& b) {
  EXPECT_EQ(a.shape(), b.shape());
  float m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TensorF gated_logits(const Supernet& net, const TensorF& x, const ArchEncoding& enc) {
  Graph<float> g;
  const auto p = bind_weights(g, net.weights, false);
  TensorF gates(Shape{enc.gates.size()});
  for (std::size_t i = 0; i < enc.gates.size(); ++i) gates[i] = enc.gates[i];
  return forward_gated(net.space, p, g.constant(x), g.constant(gates)).value();
}

}  // namespace

TEST(Supernet, CreatedWeightsHaveExpectedShapes) {
  const auto s = SearchSpace::default_space();
  Rng rng(0);
  const auto net = Supernet::create(s, rng);
  EXPECT_NO_THROW(net.check_shapes());
  EXPECT_EQ(net.weights.at("u1.b0.expand.w").shape(), (Shape{96, 16}));
  EXPECT_EQ(net.weights.at("u1.b1.dw.w").shape(), (Shape{144, 7, 7}));
  EXPECT_EQ(net.weights.at("u4.b3.project.w").shape(), (Shape{96, 576}));
  EXPECT_EQ(net.weights.at("head.fc2.w").shape(), (Shape{12, 128}));
}

TEST(Supernet, MinimalEncodingMatchesStandaloneMinimalNetwork) {
  const auto s = small_space();
  const auto net = jittered(s, 1);
  Rng rng(2);
  const auto x = batch(s, 4, rng);
  const auto enc = ArchEncoding{std::vector<std::uint8_t>(s.gate_count(), 0)};
  const auto standalone = extract(net, to_discrete(enc, s));
  EXPECT_LE(max_abs_diff(infer(net, x, enc), infer(standalone, x)), 1e-5f);
}

TEST(Supernet, ZeroDepthGatesMakeExtraBlocksExactIdentity) {
  const auto s = small_space();
  auto net = jittered(s, 3);
  Rng rng(4);
  const auto x = batch(s, 3, rng);
  auto arch = largest_arch(s);
  arch.units[1].depth = 2;
  arch.units[1].blocks.resize(2);
  const auto enc = from_discrete(arch, s);
  const TensorF before_sliced = infer(net, x, arch);
  const TensorF before_gated = gated_logits(net, x, enc);
  EXPECT_EQ(before_gated, before_sliced);
  // Scrambling blocks 3-4 of that unit must leave both paths bit-identical.
  for (auto& [name, t] : net.weights)
    if (name.starts_with("u1.b2") || name.starts_with("u1.b3"))
      for (auto& v : t.values()) v = static_cast<float>(5.0 * rng.normal());
  EXPECT_EQ(infer(net, x, arch), before_sliced);
  EXPECT_EQ(gated_logits(net, x, enc), before_gated);
}

TEST(Supernet, RepeatedForwardIsBitwiseEqual) {
  const auto s = small_space();
  const auto net = jittered(s, 5);
  Rng rng(6);
  const auto x = batch(s, 2, rng);
  const auto arch = sample_arch(s, ElasticDims::all(), rng);
  EXPECT_EQ(infer(net, x, arch), infer(net, x, arch));
}

TEST(Supernet, HardGatedForwardEqualsSlicedForwardBitwise) {
  const auto s = small_space();
  const auto net = jittered(s, 7);
  Rng rng(8);
  for (int i = 0; i < 10; ++i) {
    const auto arch = sample_arch(s, ElasticDims::all(), rng);
    const auto x = batch(s, 2, rng);
    EXPECT_EQ(gated_logits(net, x, from_discrete(arch, s)), infer(net, x, arch)) << arch.key();
  }
}

TEST(Supernet, ShapeMismatchIsReported) {
  const auto s = small_space();
  const auto net = jittered(s, 9);
  TensorF x(Shape{1, 3, 8, 9});
  EXPECT_THROW(infer(net, TensorF(Shape{1, 4, 8, 8}), largest_arch(s)), ShapeError);
  Graph<float> g;
  const auto p = bind_weights(g, net.weights, false);
  EXPECT_THROW(forward_gated(s, p, g.constant(TensorF(Shape{1, 3, 8, 8})), g.constant(TensorF(Shape{5}))),
               ShapeError);
}

TEST(Extract, LargestCopiesFullTensors) {
  const auto s = small_space();
  const auto net = jittered(s, 10);
  const auto sub = extract(net, largest_arch(s));
  ASSERT_EQ(sub.weights.size(), net.weights.size());
  for (const auto& [name, t] : sub.weights) EXPECT_EQ(t, net.weights.at(name)) << name;
}

TEST(Extract, MinimalTakesCentreKernelAndChannelPrefix) {
  const auto s = small_space();
  const auto net = jittered(s, 11);
  const auto sub = extract(net, minimal_arch(s));
  const auto& full = net.weights.at("u1.b1.dw.w");  // c_in 12, wide 72
  const auto& part = sub.weights.at("u1.b1.dw.w");
  ASSERT_EQ(part.shape(), (Shape{36, 3, 3}));
  for (std::size_t c = 0; c < 36; ++c)
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t q = 0; q < 3; ++q)
        EXPECT_EQ(part[(c * 3 + r) * 3 + q], full[(c * 7 + r + 2) * 7 + q + 2]);
  const auto& pw = sub.weights.at("u1.b1.project.w");
  ASSERT_EQ(pw.shape(), (Shape{12, 36}));
  EXPECT_EQ(pw[1 * 36 + 35], net.weights.at("u1.b1.project.w")[1 * 72 + 35]);
  EXPECT_EQ(sub.weights.at("u1.b1.expand.w").shape(), (Shape{36, 12}));
  EXPECT_EQ(sub.weights.count("u1.b2.expand.w"), 0u);
}

TEST(Extract, StandaloneAgreesWithSupernetOnRandomPairs) {
  const auto s = small_space();
  const auto net = jittered(s, 12);
  Rng rng(13);
  for (int i = 0; i < 20; ++i) {
    const auto arch = sample_arch(s, ElasticDims::all(), rng);
    const auto x = batch(s, 3, rng);
    EXPECT_LE(max_abs_diff(infer(net, x, arch), infer(extract(net, arch), x)), 1e-5f) << arch.key();
  }
}

TEST(Extract, IllegalArchIsAnError) {
  const auto s = small_space();
  const auto net = jittered(s, 14);
  auto arch = minimal_arch(s);
  arch.units[0].blocks[0].expand = 5;
  EXPECT_THROW(extract(net, arch), SpaceError);
}

TEST(Slicing, CentreMutationIsVisibleThroughKernelThreeView) {
  const auto s = small_space();
  auto net = jittered(s, 15);
  Rng rng(16);
  const auto x = batch(s, 2, rng);
  const auto arch = minimal_arch(s);
  const auto before = infer(net, x, arch);
  net.weights.at("u0.b0.dw.w")[3 * 7 + 3] += 0.5f;  // channel 0, centre tap
  const auto after = infer(net, x, arch);
  EXPECT_NE(before, after);
  EXPECT_LE(max_abs_diff(after, infer(extract(net, arch), x)), 1e-5f);
  net.weights.at("u0.b0.dw.w")[0] += 3.0f;  // corner tap, outside the 3x3 view
  EXPECT_EQ(infer(net, x, arch), after);
}

TEST(SampleArch, KernelOnlyPhasePinsDepthAndExpand) {
  const auto s = SearchSpace::default_space();
  Rng rng(17);
  std::array<int, 8> seen{};
  for (int i = 0; i < 200; ++i) {
    const auto a = sample_arch(s, {true, false, false}, rng);
    for (const auto& u : a.units) {
      EXPECT_EQ(u.depth, 4);
      for (const auto& b : u.blocks) {
        EXPECT_EQ(b.expand, 6);
        seen[b.kernel] = 1;
      }
    }
  }
  EXPECT_TRUE(seen[3] && seen[5] && seen[7]);
}

TEST(SampleArch, AllPhaseKernelMarginalsAreUniform) {
  const auto s = SearchSpace::default_space();
  Rng rng(18);
  std::array<long, 8> counts{};
  long total = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto a = sample_arch(s, ElasticDims::all(), rng);
    const auto& b = a.units[0].blocks[0];
    counts[b.kernel]++;
    ++total;
  }
  for (int k : {3, 5, 7}) EXPECT_NEAR(static_cast<double>(counts[k]) / total, 1.0 / 3.0, 0.02);
}

TEST(SampleArch, FixedSeedGivesIdenticalSequence) {
  const auto s = SearchSpace::default_space();
  Rng a(19), b(19);
  for (int i = 0; i < 50; ++i)
    EXPECT_EQ(sample_arch(s, ElasticDims::all(), a), sample_arch(s, ElasticDims::all(), b));
}

TEST(SupernetCheckpoint, RoundTripAndSpaceHashGuard) {
  const auto s = small_space();
  const auto net = jittered(s, 20);
  const auto path = std::filesystem::temp_directory_path() / "eas_supernet_test.ckpt";
  save_supernet(path, net, {{"seed", "20"}});
  const auto back = load_supernet(path, &s);
  EXPECT_EQ(back.space, s);
  EXPECT_EQ(back.weights, net.weights);
  auto other = s;
  other.units[0].output_channels = 10;
  EXPECT_THROW(load_supernet(path, &other), CheckpointError);
  std::filesystem::remove(path);
}

TEST(SupernetGradients, SoftGatedForwardMatchesFiniteDifferences) {
  SearchSpace s;
  s.units = {UnitConfig{3, 1, 4, 1}, UnitConfig{3, 1, 6, 2}};
  s.depth_choices = {1, 2, 3};
  s.stem.channels = 4;
  s.input_height = s.input_width = 6;
  s.head = {8, 4};
  s.validate();
  const auto net = jittered(s, 21);
  const auto wd = [&] {
    ParameterMap<double> m;
    for (const auto& [k, v] : net.weights) m.emplace(k, v.cast<double>());
    return m;
  }();
  Rng rng(22);
  TensorD x(Shape{2, 3, 6, 6});
  for (auto& v : x.values()) v = rng.normal();
  TensorD gates(Shape{static_cast<std::size_t>(s.gate_count())});
  for (auto& v : gates.values()) v = rng.uniform(0.1, 0.9);
  const TensorD keep(Shape{2, 4}, 1.0);
  const std::vector<int> labels{1, 3};
  auto report = gradient_check(
      [&](Graph<double>& g, const std::map<std::string, Var<double>>& p) {
        const auto w = bind_weights(g, wd, false);
        auto logits = forward_gated(s, w, g.constant(x), p.at("gates"));
        return masked_cross_entropy(logits, keep, std::span<const int>(labels));
      },
      {{"gates", gates}}, {1e-5, 1e-4, 1e-8});
  EXPECT_TRUE(report.passed()) << report.max_exact_error();
}
