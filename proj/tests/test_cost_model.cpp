#include <gtest/gtest.h>

#include <fstream>

#include "cost_oracle.h"
#include "eas/cost_model.h"
#include "eas/gradcheck.h"
#include "eas/rng.h"
#include "json.hpp"

using namespace eas;

namespace {

DiscreteArch random_arch(Rng& rng, const SearchSpace& s) {
  DiscreteArch a;
  for (std::size_t u = 0; u < s.units.size(); ++u) {
    UnitArch ua;
    ua.depth = s.depth_choices[rng.index(s.depth_choices.size())];
    for (int b = 0; b < ua.depth; ++b)
      ua.blocks.push_back({s.kernel_choices[rng.index(s.kernel_choices.size())],
                           s.expand_choices[rng.index(s.expand_choices.size())]});
    a.units.push_back(ua);
  }
  return a;
}

std::vector<std::uint8_t> random_bits(Rng& rng, int n) {
  std::vector<std::uint8_t> v(n);
  for (auto& b : v) b = rng.bernoulli(0.5);
  return v;
}

nlohmann::json golden() {
  std::ifstream in(std::string(EAS_GOLDEN_DIR) + "/default_space_madds.json");
  return nlohmann::json::parse(in);
}

SearchSpace tiny_space() {
  SearchSpace s;
  s.units = {UnitConfig{3, 2, 8, 1}, UnitConfig{3, 2, 12, 2}};
  s.depth_choices = {2, 3};
  s.kernel_choices = {3, 5};
  s.expand_choices = {3, 4};
  s.stem.channels = 8;
  s.input_height = s.input_width = 8;
  s.head = {16, 4};
  s.validate();
  return s;
}

}  // namespace

TEST(BlockMadds, WorkedExample) {
  EXPECT_EQ(block_madds(8, 8, 16, 3, 3, 16, 1), 125952);
  oracle::Counter c;
  c.conv(8, 8, 16, 48, 1, 1);
  c.depthwise(8, 8, 48, 3, 1);
  c.conv(8, 8, 48, 16, 1, 1);
  EXPECT_EQ(c.total, 125952);
}

TEST(BlockMadds, LargerKernelOnlyScalesDepthwise) {
  EXPECT_EQ(block_madds(8, 8, 16, 3, 5, 16, 1) - block_madds(8, 8, 16, 3, 3, 16, 1), 49152);
  oracle::Counter c3, c5;
  c3.depthwise(8, 8, 48, 3, 1);
  c5.depthwise(8, 8, 48, 5, 1);
  EXPECT_EQ(c5.total - c3.total, 49152);
}

TEST(BlockMadds, DegenerateSingleMultiplyPerStage) {
  EXPECT_EQ(block_madds(1, 1, 1, 1, 1, 1, 1), 3);
}

TEST(BlockMadds, StridedBlockMatchesOracle) {
  oracle::Counter c;
  c.conv(16, 16, 24, 96, 1, 1);
  c.depthwise(16, 16, 96, 7, 2);
  c.conv(8, 8, 96, 40, 1, 1);
  EXPECT_EQ(block_madds(16, 16, 24, 4, 7, 40, 2), c.total);
}

TEST(CostTable, MinimalArchIsBasePlusFixed) {
  const auto s = SearchSpace::default_space();
  const auto t = build_cost_table(s);
  MAdds expected = t.fixed();
  for (const auto& b : t.blocks)
    if (b.active_gate < 0) expected += b.base;
  EXPECT_EQ(madds_exact(from_discrete(minimal_arch(s), s), t, s), expected);
}

TEST(CostTable, GoldenEndpoints) {
  const auto s = SearchSpace::default_space();
  const auto t = build_cost_table(s);
  const auto g = golden();
  const MAdds zeros = madds_exact(ArchEncoding{std::vector<std::uint8_t>(90, 0)}, t, s);
  const MAdds ones = madds_exact(ArchEncoding{std::vector<std::uint8_t>(90, 1)}, t, s);
  EXPECT_EQ(zeros, g["all_zeros"].get<MAdds>());
  EXPECT_EQ(ones, g["all_ones"].get<MAdds>());
  EXPECT_EQ(zeros, oracle::count(minimal_arch(s), s));
  EXPECT_EQ(ones, oracle::count(largest_arch(s), s));
  EXPECT_DOUBLE_EQ(madds(ArchEncoding{std::vector<std::uint8_t>(90, 1)}, t, s),
                   static_cast<double>(ones) / 1e6);
}

TEST(CostTable, EndpointDifferenceIsSumOfAllDeltas) {
  const auto s = SearchSpace::default_space();
  const auto t = build_cost_table(s);
  MAdds deltas = 0;
  for (const auto& b : t.blocks) {
    MAdds full = b.base;
    for (auto v : b.lin_e) full += v;
    for (auto v : b.lin_k) full += v;
    for (const auto& row : b.bil)
      for (auto v : row) full += v;
    deltas += b.active_gate < 0 ? full - b.base : full;
  }
  EXPECT_EQ(oracle::count(largest_arch(s), s) - oracle::count(minimal_arch(s), s), deltas);
}

TEST(CostTable, DepthGateToggleAddsWholeBlock) {
  const auto s = SearchSpace::default_space();
  const auto t = build_cost_table(s);
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    auto d = random_arch(rng, s);
    const std::size_t u = rng.index(s.units.size());
    if (d.units[u].depth == 4) continue;
    auto deeper = d;
    const BlockArch extra{s.kernel_choices[rng.index(3)], s.expand_choices[rng.index(3)]};
    deeper.units[u].depth += 1;
    deeper.units[u].blocks.push_back(extra);
    const int b = d.units[u].depth;
    // Block b's standalone cost from the oracle's perspective.
    oracle::Counter c;
    auto [h, w] = s.unit_input_size(u);
    const int ch = s.units[u].output_channels;
    c.conv(h / s.units[u].stride, w / s.units[u].stride, ch, extra.expand * ch, 1, 1);
    c.depthwise(h / s.units[u].stride, w / s.units[u].stride, extra.expand * ch, extra.kernel, 1);
    c.conv(h / s.units[u].stride, w / s.units[u].stride, extra.expand * ch, ch, 1, 1);
    ASSERT_GE(b, 2);
    EXPECT_EQ(arch_madds_exact(deeper, t, s) - arch_madds_exact(d, t, s), c.total);
    EXPECT_EQ(oracle::count(deeper, s) - oracle::count(d, s), c.total);
  }
}

TEST(CostTable, PolynomialEqualsOracleOn100RandomArchs) {
  const auto s = SearchSpace::default_space();
  const auto t = build_cost_table(s);
  Rng rng(2024);
  for (int i = 0; i < 100; ++i) {
    const auto d = random_arch(rng, s);
    EXPECT_EQ(arch_madds_exact(d, t, s), oracle::count(d, s)) << d.key();
  }
}

TEST(CostTable, PolynomialEqualsOracleExhaustivelyOnTinySpace) {
  const auto s = tiny_space();
  const auto t = build_cost_table(s);
  std::size_t n = 0;
  enumerate(s, 1u << 20, [&](const DiscreteArch& d) {
    ASSERT_EQ(arch_madds_exact(d, t, s), oracle::count(d, s)) << d.key();
    ++n;
  });
  EXPECT_EQ(n, static_cast<std::size_t>(80 * 80));
}

TEST(Madds, UnnormalizedEncodingIsAnError) {
  const auto s = SearchSpace::default_space();
  const auto t = build_cost_table(s);
  std::vector<std::uint8_t> g(90, 0);
  g[1] = 1;  // g_d4 without g_d3
  EXPECT_THROW(madds_exact(ArchEncoding{g}, t, s), SpaceError);
}

TEST(Madds, AddingAGateNeverDecreasesCost) {
  const auto s = SearchSpace::default_space();
  const auto t = build_cost_table(s);
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const auto lo = normalize(random_bits(rng, 90), s);
    auto raw = lo.gates;
    raw[rng.index(90)] = 1;
    const auto hi = normalize(raw, s);
    EXPECT_GE(madds_exact(hi, t, s), madds_exact(lo, t, s));
  }
  for (const auto& b : t.blocks) {
    EXPECT_GE(b.base, 0);
    for (auto v : b.lin_e) EXPECT_GE(v, 0);
    for (auto v : b.lin_k) EXPECT_GE(v, 0);
  }
}

TEST(Madds, TelescopingOverDepthPrefix) {
  const auto s = SearchSpace::default_space();
  const auto t = build_cost_table(s);
  auto d = minimal_arch(s);
  MAdds prev = arch_madds_exact(d, t, s);
  for (int depth = 3; depth <= 4; ++depth) {
    d.units[3].depth = depth;
    d.units[3].blocks.push_back({5, 4});
    const MAdds cur = arch_madds_exact(d, t, s);
    auto [h, w] = s.unit_input_size(3);
    EXPECT_EQ(cur - prev, block_madds(h / 2, w / 2, 80, 4, 5, 80, 1));
    prev = cur;
  }
}

TEST(MaddsDifferentiable, BinaryActivationsEqualExactCost) {
  const auto s = SearchSpace::default_space();
  const auto t = build_cost_table(s);
  Rng rng(12);
  for (int i = 0; i < 50; ++i) {
    const auto enc = normalize(random_bits(rng, 90), s);
    TensorD a(Shape{90});
    for (int j = 0; j < 90; ++j) a[j] = enc.gates[j];
    Graph<double> g;
    auto cost = madds_differentiable(g.constant(a), t);
    EXPECT_EQ(cost.value().item(), madds(enc, t, s));
  }
}

TEST(MaddsDifferentiable, LoneLinearGateGradientIsItsDelta) {
  const auto s = SearchSpace::default_space();
  const auto t = build_cost_table(s);
  // Unit 0 block 0 is always on; with all other gates 0, d/d(g_e4) = lin_e[0].
  Graph<double> g;
  auto a = g.parameter("a", TensorD(Shape{90}, 0.0));
  auto grads = g.backward(madds_differentiable(a, t));
  const auto& blk = t.blocks[0];
  ASSERT_LT(blk.active_gate, 0);
  EXPECT_DOUBLE_EQ(grads.at("a")[blk.expand_gates[0]], static_cast<double>(blk.lin_e[0]) / 1e6);
  EXPECT_DOUBLE_EQ(grads.at("a")[blk.kernel_gates[0]], static_cast<double>(blk.lin_k[0]) / 1e6);
}

TEST(MaddsDifferentiable, GradientMatchesFiniteDifferences) {
  const auto s = SearchSpace::default_space();
  const auto t = build_cost_table(s);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    TensorD a(Shape{90});
    for (auto& v : a.values()) v = rng.uniform();
    auto report = gradient_check(
        [&](Graph<double>&, const std::map<std::string, Var<double>>& p) {
          return madds_differentiable(p.at("a"), t);
        },
        {{"a", a}}, {1e-4, 1e-6, 1e-9});
    EXPECT_LE(report.max_exact_error(), 1e-6);
  }
}
