#include "eas/search_space.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "eas/rng.h"

namespace eas {
namespace {

void require(bool cond, const std::string& what) {
  if (!cond) throw SpaceError("search space: " + what);
}

void check_choice_set(const std::vector<int>& choices, const char* name) {
  require(!choices.empty(), std::string(name) + " must not be empty");
  for (std::size_t i = 0; i < choices.size(); ++i) {
    require(choices[i] > 0, std::string(name) + " must be positive");
    if (i) require(choices[i] > choices[i - 1], std::string(name) + " must be strictly ascending");
  }
}

int choice_index(const std::vector<int>& choices, int value, const char* what) {
  auto it = std::find(choices.begin(), choices.end(), value);
  if (it == choices.end())
    throw SpaceError(std::string("illegal ") + what + " value " + std::to_string(value));
  return static_cast<int>(it - choices.begin());
}

// Number of leading ones in a thermometer group.
int level(const std::vector<std::uint8_t>& gates, const std::vector<int>& group) {
  int n = 0;
  for (int idx : group) {
    if (!gates[idx]) break;
    ++n;
  }
  return n;
}

}  // namespace

SearchSpace SearchSpace::default_space(int classes) {
  SearchSpace s;
  const int channels[] = {16, 24, 40, 80, 96};
  const int strides[] = {1, 2, 2, 2, 1};
  for (int u = 0; u < 5; ++u) s.units.push_back(UnitConfig{4, 2, channels[u], strides[u]});
  s.head.classes = classes;
  return s;
}

void SearchSpace::validate() const {
  require(!units.empty(), "at least one unit required");
  check_choice_set(depth_choices, "depth_choices");
  check_choice_set(expand_choices, "expand_choices");
  check_choice_set(kernel_choices, "kernel_choices");
  for (int k : kernel_choices) require(k % 2 == 1, "kernel sizes must be odd");
  require(stem.channels > 0 && stem.kernel > 0 && stem.kernel % 2 == 1 && stem.stride > 0,
          "invalid stem");
  require(head.hidden > 0 && head.classes > 1, "invalid head");
  require(input_height > 0 && input_width > 0 && input_channels > 0, "invalid input resolution");
  require(input_height % stem.stride == 0 && input_width % stem.stride == 0,
          "stem stride must divide input resolution");
  for (std::size_t u = 0; u < units.size(); ++u) {
    const UnitConfig& uc = units[u];
    require(uc.min_blocks >= 1 && uc.min_blocks <= uc.max_blocks,
            "unit " + std::to_string(u) + ": need 1 <= min_blocks <= max_blocks");
    require(uc.output_channels > 0, "unit " + std::to_string(u) + ": output_channels");
    require(uc.stride == 1 || uc.stride == 2, "unit " + std::to_string(u) + ": stride in {1,2}");
    require(depth_choices.front() >= uc.min_blocks && depth_choices.back() <= uc.max_blocks,
            "depth choices must lie in [min_blocks, max_blocks] of unit " + std::to_string(u));
    auto [h, w] = unit_input_size(u);
    require(h % uc.stride == 0 && w % uc.stride == 0,
            "unit " + std::to_string(u) + ": stride does not divide feature size");
  }
}

int SearchSpace::unit_input_channels(std::size_t unit) const {
  return unit == 0 ? stem.channels : units.at(unit - 1).output_channels;
}

int SearchSpace::block_input_channels(std::size_t unit, std::size_t block) const {
  return block == 0 ? unit_input_channels(unit) : units.at(unit).output_channels;
}

int SearchSpace::block_stride(std::size_t unit, std::size_t block) const {
  return block == 0 ? units.at(unit).stride : 1;
}

std::pair<int, int> SearchSpace::unit_input_size(std::size_t unit) const {
  int h = input_height / stem.stride, w = input_width / stem.stride;
  for (std::size_t u = 0; u < unit; ++u) {
    h /= units[u].stride;
    w /= units[u].stride;
  }
  return {h, w};
}

bool SearchSpace::block_has_residual(std::size_t unit, std::size_t block) const {
  return block_stride(unit, block) == 1 &&
         block_input_channels(unit, block) == units.at(unit).output_channels;
}

int SearchSpace::gate_count() const {
  const int per_block = static_cast<int>(kernel_choices.size() + expand_choices.size()) - 2;
  int n = 0;
  for (const auto& u : units) n += static_cast<int>(depth_choices.size()) - 1 + u.max_blocks * per_block;
  return n;
}

std::vector<UnitGates> SearchSpace::gate_layout() const {
  std::vector<UnitGates> layout;
  int next = 0;
  for (const auto& u : units) {
    UnitGates ug;
    for (std::size_t j = 1; j < depth_choices.size(); ++j) ug.depth.push_back(next++);
    for (int b = 0; b < u.max_blocks; ++b) {
      BlockGates bg;
      for (std::size_t j = 1; j < kernel_choices.size(); ++j) bg.kernel.push_back(next++);
      for (std::size_t j = 1; j < expand_choices.size(); ++j) bg.expand.push_back(next++);
      ug.blocks.push_back(std::move(bg));
    }
    layout.push_back(std::move(ug));
  }
  return layout;
}

std::vector<std::vector<int>> SearchSpace::gate_groups() const {
  std::vector<std::vector<int>> groups;
  for (const auto& ug : gate_layout()) {
    if (!ug.depth.empty()) groups.push_back(ug.depth);
    for (const auto& bg : ug.blocks) {
      if (!bg.kernel.empty()) groups.push_back(bg.kernel);
      if (!bg.expand.empty()) groups.push_back(bg.expand);
    }
  }
  return groups;
}

int SearchSpace::block_active_gate(std::size_t unit, std::size_t block) const {
  // block b is active iff depth > b; find the first depth level that exceeds b
  const int b = static_cast<int>(block);
  if (depth_choices.front() > b) return -1;
  const auto layout = gate_layout();
  for (std::size_t j = 1; j < depth_choices.size(); ++j)
    if (depth_choices[j] > b) return layout[unit].depth[j - 1];
  return -2;  // never active
}

nlohmann::json SearchSpace::to_json() const {
  nlohmann::json j;
  j["units"] = nlohmann::json::array();
  for (const auto& u : units)
    j["units"].push_back({{"max_blocks", u.max_blocks},
                          {"min_blocks", u.min_blocks},
                          {"output_channels", u.output_channels},
                          {"stride", u.stride}});
  j["depth_choices"] = depth_choices;
  j["expand_choices"] = expand_choices;
  j["kernel_choices"] = kernel_choices;
  j["stem"] = {{"channels", stem.channels}, {"kernel", stem.kernel}, {"stride", stem.stride}};
  j["head"] = {{"hidden", head.hidden}, {"classes", head.classes}};
  j["input_resolution"] = {input_height, input_width, input_channels};
  return j;
}

SearchSpace SearchSpace::from_json(const nlohmann::json& j) {
  SearchSpace s;
  try {
    for (const auto& u : j.at("units")) {
      UnitConfig uc;
      uc.max_blocks = u.value("max_blocks", 4);
      uc.min_blocks = u.value("min_blocks", 2);
      uc.output_channels = u.at("output_channels").get<int>();
      uc.stride = u.value("stride", 1);
      s.units.push_back(uc);
    }
    if (j.contains("depth_choices")) s.depth_choices = j["depth_choices"].get<std::vector<int>>();
    if (j.contains("expand_choices")) s.expand_choices = j["expand_choices"].get<std::vector<int>>();
    if (j.contains("kernel_choices")) s.kernel_choices = j["kernel_choices"].get<std::vector<int>>();
    if (j.contains("stem")) {
      s.stem.channels = j["stem"].value("channels", 16);
      s.stem.kernel = j["stem"].value("kernel", 3);
      s.stem.stride = j["stem"].value("stride", 1);
    }
    if (j.contains("head")) {
      s.head.hidden = j["head"].value("hidden", 128);
      s.head.classes = j["head"].value("classes", 12);
    }
    if (j.contains("input_resolution")) {
      const auto r = j["input_resolution"].get<std::vector<int>>();
      if (r.size() != 3) throw SpaceError("input_resolution must be [H, W, C]");
      s.input_height = r[0];
      s.input_width = r[1];
      s.input_channels = r[2];
    }
  } catch (const nlohmann::json::exception& e) {
    throw SpaceError(std::string("search space JSON: ") + e.what());
  }
  s.validate();
  return s;
}

std::uint64_t SearchSpace::hash() const { return fnv1a64(to_json().dump()); }

nlohmann::json DiscreteArch::to_json() const {
  nlohmann::json j;
  j["units"] = nlohmann::json::array();
  for (const auto& u : units) {
    nlohmann::json ju;
    ju["depth"] = u.depth;
    ju["blocks"] = nlohmann::json::array();
    for (const auto& b : u.blocks) ju["blocks"].push_back({{"kernel", b.kernel}, {"expand", b.expand}});
    j["units"].push_back(ju);
  }
  return j;
}

DiscreteArch DiscreteArch::from_json(const nlohmann::json& j) {
  DiscreteArch a;
  try {
    for (const auto& ju : j.at("units")) {
      UnitArch u;
      u.depth = ju.at("depth").get<int>();
      for (const auto& jb : ju.at("blocks"))
        u.blocks.push_back(BlockArch{jb.at("kernel").get<int>(), jb.at("expand").get<int>()});
      a.units.push_back(std::move(u));
    }
  } catch (const nlohmann::json::exception& e) {
    throw SpaceError(std::string("architecture JSON: ") + e.what());
  }
  return a;
}

std::string DiscreteArch::key() const {
  std::ostringstream os;
  for (std::size_t u = 0; u < units.size(); ++u) {
    if (u) os << '|';
    os << units[u].depth << ':';
    for (std::size_t b = 0; b < units[u].blocks.size(); ++b) {
      if (b) os << ',';
      os << units[u].blocks[b].kernel << '/' << units[u].blocks[b].expand;
    }
  }
  return os.str();
}

ArchEncoding normalize(const std::vector<std::uint8_t>& raw, const SearchSpace& space) {
  if (static_cast<int>(raw.size()) != space.gate_count())
    throw SpaceError("normalize: expected " + std::to_string(space.gate_count()) +
                     " gates, got " + std::to_string(raw.size()));
  ArchEncoding enc{raw};
  for (auto& g : enc.gates) g = g ? 1 : 0;
  for (const auto& group : space.gate_groups()) {
    std::uint8_t on = 1;
    for (int idx : group) {
      on = on & enc.gates[idx];
      enc.gates[idx] = on;
    }
  }
  return enc;
}

bool is_normalized(const ArchEncoding& enc, const SearchSpace& space) {
  if (static_cast<int>(enc.gates.size()) != space.gate_count()) return false;
  return normalize(enc.gates, space) == enc;
}

void validate_arch(const DiscreteArch& arch, const SearchSpace& space) {
  if (arch.units.size() != space.units.size())
    throw SpaceError("architecture has " + std::to_string(arch.units.size()) + " units, space has " +
                     std::to_string(space.units.size()));
  for (std::size_t u = 0; u < arch.units.size(); ++u) {
    const UnitArch& ua = arch.units[u];
    choice_index(space.depth_choices, ua.depth, "depth");
    if (static_cast<int>(ua.blocks.size()) != ua.depth)
      throw SpaceError("unit " + std::to_string(u) + ": depth " + std::to_string(ua.depth) +
                       " but " + std::to_string(ua.blocks.size()) + " block entries");
    for (const auto& b : ua.blocks) {
      choice_index(space.kernel_choices, b.kernel, "kernel");
      choice_index(space.expand_choices, b.expand, "expand");
    }
  }
}

DiscreteArch to_discrete(const ArchEncoding& enc, const SearchSpace& space) {
  if (!is_normalized(enc, space)) throw SpaceError("to_discrete: encoding is not normalized");
  DiscreteArch arch;
  const auto layout = space.gate_layout();
  for (std::size_t u = 0; u < space.units.size(); ++u) {
    UnitArch ua;
    ua.depth = space.depth_choices[level(enc.gates, layout[u].depth)];
    for (int b = 0; b < ua.depth; ++b) {
      const BlockGates& bg = layout[u].blocks[b];
      ua.blocks.push_back(BlockArch{space.kernel_choices[level(enc.gates, bg.kernel)],
                                    space.expand_choices[level(enc.gates, bg.expand)]});
    }
    arch.units.push_back(std::move(ua));
  }
  return arch;
}

ArchEncoding from_discrete(const DiscreteArch& arch, const SearchSpace& space) {
  validate_arch(arch, space);
  ArchEncoding enc;
  enc.gates.assign(space.gate_count(), 0);
  const auto layout = space.gate_layout();
  auto set_level = [&](const std::vector<int>& group, int lvl) {
    for (int j = 0; j < lvl; ++j) enc.gates[group[j]] = 1;
  };
  for (std::size_t u = 0; u < arch.units.size(); ++u) {
    const UnitArch& ua = arch.units[u];
    set_level(layout[u].depth, choice_index(space.depth_choices, ua.depth, "depth"));
    for (std::size_t b = 0; b < ua.blocks.size(); ++b) {
      set_level(layout[u].blocks[b].kernel,
                choice_index(space.kernel_choices, ua.blocks[b].kernel, "kernel"));
      set_level(layout[u].blocks[b].expand,
                choice_index(space.expand_choices, ua.blocks[b].expand, "expand"));
    }
  }
  return enc;
}

DiscreteArch minimal_arch(const SearchSpace& space) {
  DiscreteArch a;
  for (std::size_t u = 0; u < space.units.size(); ++u)
    a.units.push_back(UnitArch{space.depth_choices.front(),
                               std::vector<BlockArch>(space.depth_choices.front(),
                                                      BlockArch{space.kernel_choices.front(),
                                                                space.expand_choices.front()})});
  return a;
}

DiscreteArch largest_arch(const SearchSpace& space) {
  DiscreteArch a;
  for (std::size_t u = 0; u < space.units.size(); ++u)
    a.units.push_back(UnitArch{space.depth_choices.back(),
                               std::vector<BlockArch>(space.depth_choices.back(),
                                                      BlockArch{space.kernel_choices.back(),
                                                                space.expand_choices.back()})});
  return a;
}

std::vector<std::uint8_t> one_hot(const DiscreteArch& arch, const SearchSpace& space) {
  validate_arch(arch, space);
  std::vector<std::uint8_t> v;
  for (std::size_t u = 0; u < space.units.size(); ++u) {
    const UnitArch& ua = arch.units[u];
    for (int d : space.depth_choices) v.push_back(d == ua.depth);
    for (int b = 0; b < space.units[u].max_blocks; ++b) {
      const bool active = b < ua.depth;
      for (int k : space.kernel_choices) v.push_back(active && ua.blocks[b].kernel == k);
      for (int e : space.expand_choices) v.push_back(active && ua.blocks[b].expand == e);
    }
  }
  return v;
}

double cosine_similarity(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  if (a.size() != b.size()) throw SpaceError("cosine: encodings come from different spaces");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / std::sqrt(na * nb);
}

double arch_cosine(const DiscreteArch& a, const DiscreteArch& b, const SearchSpace& space) {
  return cosine_similarity(one_hot(a, space), one_hot(b, space));
}

ArchCount count_architectures(const SearchSpace& space) {
  const ArchCount per_block = static_cast<ArchCount>(space.kernel_choices.size()) *
                              static_cast<ArchCount>(space.expand_choices.size());
  ArchCount total = 1;
  for (std::size_t u = 0; u < space.units.size(); ++u) {
    ArchCount unit_total = 0;
    for (int d : space.depth_choices) {
      ArchCount t = 1;
      for (int i = 0; i < d; ++i) t *= per_block;
      unit_total += t;
    }
    total *= unit_total;
  }
  return total;
}

std::string to_string(ArchCount v) {
  if (v == 0) return "0";
  std::string s;
  while (v > 0) {
    s.push_back(static_cast<char>('0' + static_cast<int>(v % 10)));
    v /= 10;
  }
  std::reverse(s.begin(), s.end());
  return s;
}

void enumerate(const SearchSpace& space, std::uint64_t limit,
               const std::function<void(const DiscreteArch&)>& visit) {
  const ArchCount total = count_architectures(space);
  if (total > limit)
    throw SpaceError("enumerate: space holds " + to_string(total) + " architectures, limit is " +
                     std::to_string(limit));
  // Per unit, list every (depth, block choices) option; then take the product.
  std::vector<std::vector<UnitArch>> options(space.units.size());
  for (std::size_t u = 0; u < space.units.size(); ++u) {
    for (int d : space.depth_choices) {
      std::vector<int> digits(2 * d, 0);  // (kernel idx, expand idx) per block
      while (true) {
        UnitArch ua{d, {}};
        for (int b = 0; b < d; ++b)
          ua.blocks.push_back(
              BlockArch{space.kernel_choices[digits[2 * b]], space.expand_choices[digits[2 * b + 1]]});
        options[u].push_back(std::move(ua));
        int pos = 2 * d - 1;
        for (; pos >= 0; --pos) {
          const int base = static_cast<int>(pos % 2 == 0 ? space.kernel_choices.size()
                                                         : space.expand_choices.size());
          if (++digits[pos] < base) break;
          digits[pos] = 0;
        }
        if (pos < 0) break;
      }
    }
  }
  std::vector<std::size_t> idx(space.units.size(), 0);
  while (true) {
    DiscreteArch a;
    for (std::size_t u = 0; u < space.units.size(); ++u) a.units.push_back(options[u][idx[u]]);
    visit(a);
    int pos = static_cast<int>(space.units.size()) - 1;
    for (; pos >= 0; --pos) {
      if (++idx[pos] < options[pos].size()) break;
      idx[pos] = 0;
    }
    if (pos < 0) break;
  }
}

std::vector<DiscreteArch> enumerate_all(const SearchSpace& space, std::uint64_t limit) {
  std::vector<DiscreteArch> out;
  enumerate(space, limit, [&](const DiscreteArch& a) { out.push_back(a); });
  return out;
}

}  // namespace eas
