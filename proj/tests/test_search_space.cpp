#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "eas/rng.h"
#include "eas/search_space.h"

using namespace eas;

namespace {

SearchSpace tiny_space(std::vector<int> depths, std::vector<int> kernels, std::vector<int> expands,
                       int max_blocks) {
  SearchSpace s;
  s.units = {UnitConfig{max_blocks, depths.front(), 8, 1}};
  s.depth_choices = std::move(depths);
  s.kernel_choices = std::move(kernels);
  s.expand_choices = std::move(expands);
  s.stem.channels = 8;
  s.input_height = s.input_width = 8;
  s.head = {16, 4};
  s.validate();
  return s;
}

std::vector<std::uint8_t> random_bits(Rng& rng, int n) {
  std::vector<std::uint8_t> v(n);
  for (auto& b : v) b = rng.bernoulli(0.5);
  return v;
}

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

}  // namespace

TEST(SearchSpace, DefaultSpaceHasNinetyGates) {
  const auto s = SearchSpace::default_space();
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(s.gate_count(), 5 * (2 + 4 * 4));
  EXPECT_EQ(s.gate_count(), 90);
  const auto layout = s.gate_layout();
  // unit 0: depth gates 0,1 then block 0 kernel 2,3 expand 4,5
  EXPECT_EQ(layout[0].depth, (std::vector<int>{0, 1}));
  EXPECT_EQ(layout[0].blocks[0].kernel, (std::vector<int>{2, 3}));
  EXPECT_EQ(layout[0].blocks[0].expand, (std::vector<int>{4, 5}));
  EXPECT_EQ(layout[1].depth, (std::vector<int>{18, 19}));
}

TEST(SearchSpace, InvalidConfigsAreRejected) {
  auto s = SearchSpace::default_space();
  s.units[0].min_blocks = 5;
  EXPECT_THROW(s.validate(), SpaceError);
  s = SearchSpace::default_space();
  s.kernel_choices = {3, 4};
  EXPECT_THROW(s.validate(), SpaceError);
  s = SearchSpace::default_space();
  s.depth_choices = {1, 2};
  EXPECT_THROW(s.validate(), SpaceError);
}

TEST(SearchSpace, JsonRoundTripAndHash) {
  const auto s = SearchSpace::default_space();
  const auto back = SearchSpace::from_json(nlohmann::json::parse(s.to_json().dump()));
  EXPECT_EQ(back, s);
  EXPECT_EQ(back.hash(), s.hash());
  auto other = s;
  other.units[2].output_channels = 48;
  EXPECT_NE(other.hash(), s.hash());
}

TEST(Normalize, AllZerosStaysZero) {
  const auto s = SearchSpace::default_space();
  const auto enc = normalize(std::vector<std::uint8_t>(90, 0), s);
  EXPECT_EQ(enc.gates, std::vector<std::uint8_t>(90, 0));
  const auto d = to_discrete(enc, s);
  EXPECT_EQ(d, minimal_arch(s));
}

TEST(Normalize, DeeperGateWithoutShallowerIsCleared) {
  const auto s = SearchSpace::default_space();
  std::vector<std::uint8_t> raw(90, 0);
  raw[s.gate_layout()[2].depth[1]] = 1;  // g_d4 = 1, g_d3 = 0
  const auto enc = normalize(raw, s);
  EXPECT_EQ(enc.gates[s.gate_layout()[2].depth[0]], 0);
  EXPECT_EQ(enc.gates[s.gate_layout()[2].depth[1]], 0);
}

TEST(Normalize, IsIdempotentOver1000Seeds) {
  const auto s = SearchSpace::default_space();
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(seed);
    const auto once = normalize(random_bits(rng, 90), s);
    EXPECT_EQ(normalize(once.gates, s), once);
    EXPECT_TRUE(is_normalized(once, s));
  }
}

TEST(Normalize, WrongLengthIsAnError) {
  EXPECT_THROW(normalize(std::vector<std::uint8_t>(89, 0), SearchSpace::default_space()), SpaceError);
}

TEST(ToDiscrete, AllOnesIsLargest) {
  const auto s = SearchSpace::default_space();
  const auto d = to_discrete(ArchEncoding{std::vector<std::uint8_t>(90, 1)}, s);
  for (const auto& u : d.units) {
    EXPECT_EQ(u.depth, 4);
    for (const auto& b : u.blocks) {
      EXPECT_EQ(b.kernel, 7);
      EXPECT_EQ(b.expand, 6);
    }
  }
  EXPECT_EQ(d, largest_arch(s));
}

TEST(ToDiscrete, SingleBlockKernelFiveExpandFour) {
  const auto s = SearchSpace::default_space();
  std::vector<std::uint8_t> g(90, 0);
  const auto layout = s.gate_layout();
  const auto& blk = layout[0].blocks[1];
  g[blk.kernel[0]] = 1;  // g_k5
  g[blk.expand[0]] = 1;  // g_e4
  const auto d = to_discrete(ArchEncoding{g}, s);
  EXPECT_EQ(d.units[0].blocks[1].kernel, 5);
  EXPECT_EQ(d.units[0].blocks[1].expand, 4);
  EXPECT_EQ(d.units[0].blocks[0].kernel, 3);
}

TEST(ToDiscrete, UnnormalizedInputIsAnError) {
  const auto s = SearchSpace::default_space();
  std::vector<std::uint8_t> g(90, 0);
  g[s.gate_layout()[0].blocks[0].kernel[1]] = 1;  // g_k7 without g_k5
  EXPECT_THROW(to_discrete(ArchEncoding{g}, s), SpaceError);
}

TEST(FromDiscrete, InvertsTheThreeExamples) {
  const auto s = SearchSpace::default_space();
  EXPECT_EQ(from_discrete(largest_arch(s), s).gates, std::vector<std::uint8_t>(90, 1));
  EXPECT_EQ(from_discrete(minimal_arch(s), s).gates, std::vector<std::uint8_t>(90, 0));
  auto d = minimal_arch(s);
  d.units[0].blocks[1] = {5, 4};
  const auto enc = from_discrete(d, s);
  const auto layout = s.gate_layout();
  const auto& blk = layout[0].blocks[1];
  EXPECT_EQ(enc.gates[blk.kernel[0]], 1);
  EXPECT_EQ(enc.gates[blk.kernel[1]], 0);
  EXPECT_EQ(enc.gates[blk.expand[0]], 1);
  EXPECT_EQ(enc.gates[blk.expand[1]], 0);
}

TEST(FromDiscrete, IllegalChoiceIsAnError) {
  const auto s = SearchSpace::default_space();
  auto d = minimal_arch(s);
  d.units[1].blocks[0].kernel = 9;
  EXPECT_THROW(from_discrete(d, s), SpaceError);
  d = minimal_arch(s);
  d.units[1].depth = 3;  // block list still has 2 entries
  EXPECT_THROW(from_discrete(d, s), SpaceError);
}

TEST(RoundTrip, ExhaustiveOnTinySpace) {
  const auto s = tiny_space({2, 3}, {3, 5}, {3, 4}, 3);
  int n = 0;
  enumerate(s, 10000, [&](const DiscreteArch& d) {
    EXPECT_EQ(to_discrete(from_discrete(d, s), s), d);
    ++n;
  });
  EXPECT_EQ(n, 16 + 64);
}

TEST(RoundTrip, SampledOnDefaultSpace) {
  const auto s = SearchSpace::default_space();
  Rng rng(99);
  for (int i = 0; i < 500; ++i) {
    const auto d = random_arch(rng, s);
    EXPECT_EQ(to_discrete(from_discrete(d, s), s), d);
    EXPECT_EQ(DiscreteArch::from_json(nlohmann::json::parse(d.to_json().dump())), d);
  }
}

TEST(ArchJson, InterchangeFormat) {
  const auto s = tiny_space({2}, {3, 5}, {3, 4}, 2);
  DiscreteArch d{{UnitArch{2, {{5, 3}, {3, 4}}}}};
  EXPECT_EQ(d.to_json().dump(),
            R"({"units":[{"blocks":[{"expand":3,"kernel":5},{"expand":4,"kernel":3}],"depth":2}]})");
  EXPECT_EQ(d.key(), "2:5/3,3/4");
  validate_arch(d, s);
}

TEST(Cosine, IdenticalArchsGiveOne) {
  const auto s = SearchSpace::default_space();
  Rng rng(1);
  const auto d = random_arch(rng, s);
  EXPECT_DOUBLE_EQ(arch_cosine(d, d, s), 1.0);
}

TEST(Cosine, MinimalVsLargestMatchesDotProductOracle) {
  const auto s = SearchSpace::default_space();
  const auto a = one_hot(minimal_arch(s), s);
  const auto b = one_hot(largest_arch(s), s);
  // Oracle: explicit one-hot construction from the definition.
  // Minimal: per unit depth one-hot at index 0 (1 bit), blocks 0-1 active with
  // kernel 3 and expand 3 (2 bits each), blocks 2-3 zero: 1 + 2*2 = 5 bits.
  // Largest: depth index 2 (1 bit), 4 active blocks with kernel 7 and expand 6
  // (2 bits each): 1 + 4*2 = 9 bits. No position is shared.
  long dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i];
    nb += b[i];
  }
  EXPECT_EQ(na, 25);
  EXPECT_EQ(nb, 45);
  EXPECT_EQ(dot, 0);
  EXPECT_DOUBLE_EQ(arch_cosine(minimal_arch(s), largest_arch(s), s), 0.0);

  // A pair that shares something: minimal vs minimal with unit 0 deepened to 3.
  auto c = minimal_arch(s);
  c.units[0].depth = 3;
  c.units[0].blocks.push_back({3, 3});
  // shared bits: units 1-4 fully (5 each = 20) + unit 0 blocks 0-1 (4); norms 25 and 27
  EXPECT_NEAR(arch_cosine(minimal_arch(s), c, s), 24.0 / std::sqrt(25.0 * 27.0), 1e-15);
}

TEST(Cosine, IsSymmetricFor100RandomPairs) {
  const auto s = SearchSpace::default_space();
  Rng rng(17);
  for (int i = 0; i < 100; ++i) {
    const auto a = random_arch(rng, s), b = random_arch(rng, s);
    const double ab = arch_cosine(a, b, s), ba = arch_cosine(b, a, s);
    EXPECT_EQ(ab, ba);
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 1.0);
  }
}

TEST(Cosine, SpaceMismatchIsAnError) {
  EXPECT_THROW(cosine_similarity({1, 0}, {1, 0, 1}), SpaceError);
}

TEST(Enumerate, TwoDepthsOneChoice) {
  const auto s = tiny_space({2, 3}, {3}, {3}, 3);
  EXPECT_EQ(enumerate_all(s, 100).size(), 2u);
}

TEST(Enumerate, TwoBlocksTwoByTwoChoices) {
  const auto s = tiny_space({2}, {3, 5}, {3, 4}, 2);
  const auto all = enumerate_all(s, 100);
  EXPECT_EQ(all.size(), 16u);
  std::set<std::string> keys;
  for (const auto& a : all) keys.insert(a.key());
  EXPECT_EQ(keys.size(), 16u);
  EXPECT_EQ(enumerate_all(s, 100), all);  // deterministic order
}

TEST(Enumerate, DefaultSpaceCountMatchesClosedForm) {
  const auto s = SearchSpace::default_space();
  // per unit: 9^2 + 9^3 + 9^4 = 81 + 729 + 6561 = 7371; five units.
  ArchCount expected = 1;
  for (int u = 0; u < 5; ++u) expected *= 7371;
  EXPECT_EQ(count_architectures(s), expected);
  EXPECT_EQ(to_string(count_architectures(s)), "21758655492572485851");
  EXPECT_THROW(enumerate(s, 1000000, [](const DiscreteArch&) {}), SpaceError);
}
