#include "eas/supernet.h"

#include <cmath>
#include <sstream>

namespace eas {
namespace {

TensorF normal_tensor(Shape shape, double stddev, Rng& rng) {
  TensorF t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<float>(stddev * rng.normal());
  return t;
}

struct ExpectedShape {
  std::string name;
  Shape shape;
};

std::vector<ExpectedShape> expected_shapes(const SearchSpace& s) {
  std::vector<ExpectedShape> out;
  const auto sc = static_cast<std::size_t>(s.stem.channels);
  const auto sk = static_cast<std::size_t>(s.stem.kernel);
  out.push_back({"stem.w", {sc, static_cast<std::size_t>(s.input_channels), sk, sk}});
  out.push_back({"stem.scale", {sc}});
  out.push_back({"stem.bias", {sc}});
  const auto kmax = static_cast<std::size_t>(s.max_kernel());
  for (std::size_t u = 0; u < s.units.size(); ++u)
    for (int b = 0; b < s.units[u].max_blocks; ++b) {
      if (s.block_active_gate(u, b) == -2) continue;
      const std::string pre = block_prefix(u, b);
      const auto c_in = static_cast<std::size_t>(s.block_input_channels(u, b));
      const auto c_out = static_cast<std::size_t>(s.units[u].output_channels);
      const std::size_t wide = static_cast<std::size_t>(s.max_expand()) * c_in;
      out.push_back({pre + ".expand.w", {wide, c_in}});
      out.push_back({pre + ".expand.scale", {wide}});
      out.push_back({pre + ".expand.bias", {wide}});
      out.push_back({pre + ".dw.w", {wide, kmax, kmax}});
      out.push_back({pre + ".dw.scale", {wide}});
      out.push_back({pre + ".dw.bias", {wide}});
      out.push_back({pre + ".project.w", {c_out, wide}});
      out.push_back({pre + ".project.scale", {c_out}});
      out.push_back({pre + ".project.bias", {c_out}});
    }
  const auto last = static_cast<std::size_t>(s.units.back().output_channels);
  const auto hidden = static_cast<std::size_t>(s.head.hidden);
  const auto classes = static_cast<std::size_t>(s.head.classes);
  out.push_back({"head.fc1.w", {hidden, last}});
  out.push_back({"head.fc1.b", {hidden}});
  out.push_back({"head.fc2.w", {classes, hidden}});
  out.push_back({"head.fc2.b", {classes}});
  return out;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << v;
  return os.str();
}

}  // namespace

std::string block_prefix(std::size_t unit, std::size_t block) {
  return "u" + std::to_string(unit) + ".b" + std::to_string(block);
}

Supernet Supernet::create(const SearchSpace& space, Rng& rng) {
  space.validate();
  Supernet net{space, {}};
  const double mid_kernel = space.kernel_choices[space.kernel_choices.size() / 2];
  const double mid_expand = space.expand_choices[space.expand_choices.size() / 2];
  for (const auto& [name, shape] : expected_shapes(space)) {
    const bool is_scale = name.ends_with(".scale");
    const bool is_bias = name.ends_with(".bias") || name.ends_with(".b");
    if (is_bias) {
      net.weights.emplace(name, TensorF(shape, 0.0f));
    } else if (is_scale) {
      float v = 1.0f;
      // Residual branches start damped so a deep stack begins near identity.
      if (name.ends_with(".project.scale")) {
        const auto u = static_cast<std::size_t>(std::stoul(name.substr(1)));
        const auto b = static_cast<std::size_t>(std::stoul(name.substr(name.find(".b") + 2)));
        if (space.block_has_residual(u, b)) v = 0.25f;
      }
      net.weights.emplace(name, TensorF(shape, v));
    } else if (name.ends_with(".dw.w")) {
      net.weights.emplace(name, normal_tensor(shape, std::sqrt(2.0 / (mid_kernel * mid_kernel)), rng));
    } else if (name.ends_with(".project.w")) {
      const double fan_in = mid_expand * static_cast<double>(shape[1]) / space.max_expand();
      net.weights.emplace(name, normal_tensor(shape, std::sqrt(1.0 / fan_in), rng));
    } else if (name == "head.fc2.w") {
      net.weights.emplace(name, normal_tensor(shape, std::sqrt(1.0 / static_cast<double>(shape[1])), rng));
    } else {
      std::size_t fan_in = 1;
      for (std::size_t d = 1; d < shape.size(); ++d) fan_in *= shape[d];
      net.weights.emplace(name, normal_tensor(shape, std::sqrt(2.0 / static_cast<double>(fan_in)), rng));
    }
  }
  return net;
}

void Supernet::check_shapes() const {
  const auto expected = expected_shapes(space);
  for (const auto& [name, shape] : expected) {
    auto it = weights.find(name);
    if (it == weights.end()) throw SupernetError("supernet weights: missing tensor '" + name + "'");
    if (it->second.shape() != shape)
      throw SupernetError("supernet weights: '" + name + "' has shape " + shape_str(it->second.shape()) +
                          ", expected " + shape_str(shape));
  }
  if (weights.size() != expected.size())
    throw SupernetError("supernet weights: " + std::to_string(weights.size()) + " tensors, expected " +
                        std::to_string(expected.size()));
}

DiscreteArch sample_arch(const SearchSpace& space, const ElasticDims& dims, Rng& rng) {
  auto pick = [&](const std::vector<int>& choices, bool elastic) {
    return elastic ? choices[rng.index(choices.size())] : choices.back();
  };
  DiscreteArch arch;
  for (std::size_t u = 0; u < space.units.size(); ++u) {
    UnitArch ua;
    ua.depth = pick(space.depth_choices, dims.depth);
    for (int b = 0; b < ua.depth; ++b) {
      const int k = pick(space.kernel_choices, dims.kernel);
      const int e = pick(space.expand_choices, dims.expand);
      ua.blocks.push_back({k, e});
    }
    arch.units.push_back(std::move(ua));
  }
  return arch;
}

StandaloneNet extract(const Supernet& net, const DiscreteArch& arch) {
  const SearchSpace& s = net.space;
  validate_arch(arch, s);
  StandaloneNet out{s, arch, {}};
  auto copy = [&](const std::string& name) { out.weights.emplace(name, net.weights.at(name)); };
  for (const char* n : {"stem.w", "stem.scale", "stem.bias", "head.fc1.w", "head.fc1.b", "head.fc2.w",
                        "head.fc2.b"})
    copy(n);
  const int kmax = s.max_kernel();
  for (std::size_t u = 0; u < s.units.size(); ++u)
    for (int b = 0; b < arch.units[u].depth; ++b) {
      const std::string pre = block_prefix(u, b);
      const auto c_in = static_cast<std::size_t>(s.block_input_channels(u, b));
      const auto c_out = static_cast<std::size_t>(s.units[u].output_channels);
      const std::size_t mid = static_cast<std::size_t>(arch.units[u].blocks[b].expand) * c_in;
      const auto k = static_cast<std::size_t>(arch.units[u].blocks[b].kernel);
      const std::size_t off = static_cast<std::size_t>(kmax - static_cast<int>(k)) / 2;
      const std::size_t wide = net.weights.at(pre + ".expand.scale").size();

      auto prefix = [&](const std::string& name) {
        const TensorF& src = net.weights.at(name);
        const std::size_t row = src.size() / src.dim(0);
        std::vector<float> v(src.data(), src.data() + mid * row);
        Shape shape = src.shape();
        shape[0] = mid;
        out.weights.emplace(name, TensorF(shape, std::move(v)));
      };
      prefix(pre + ".expand.w");
      prefix(pre + ".expand.scale");
      prefix(pre + ".expand.bias");
      prefix(pre + ".dw.scale");
      prefix(pre + ".dw.bias");

      const TensorF& dw = net.weights.at(pre + ".dw.w");
      TensorF dws(Shape{mid, k, k});
      for (std::size_t c = 0; c < mid; ++c)
        for (std::size_t r = 0; r < k; ++r)
          for (std::size_t q = 0; q < k; ++q)
            dws[(c * k + r) * k + q] = dw[(c * kmax + r + off) * kmax + q + off];
      out.weights.emplace(pre + ".dw.w", std::move(dws));

      const TensorF& pw = net.weights.at(pre + ".project.w");
      TensorF pws(Shape{c_out, mid});
      for (std::size_t o = 0; o < c_out; ++o)
        for (std::size_t c = 0; c < mid; ++c) pws[o * mid + c] = pw[o * wide + c];
      out.weights.emplace(pre + ".project.w", std::move(pws));
      copy(pre + ".project.scale");
      copy(pre + ".project.bias");
    }
  return out;
}

void save_supernet(const std::filesystem::path& path, const Supernet& net,
                   std::map<std::string, std::string> metadata) {
  net.check_shapes();
  Checkpoint c;
  c.metadata = std::move(metadata);
  c.metadata["kind"] = "supernet";
  c.metadata["space"] = net.space.to_json().dump();
  c.metadata["space_hash"] = hex64(net.space.hash());
  c.tensors = net.weights;
  save_checkpoint(path, c);
}

Supernet load_supernet(const std::filesystem::path& path, const SearchSpace* expected) {
  const Checkpoint c = load_checkpoint(path);
  if (c.meta("kind") != "supernet") throw CheckpointError(path.string() + ": not a supernet checkpoint");
  Supernet net{SearchSpace::from_json(nlohmann::json::parse(c.meta("space"))), c.tensors};
  if (hex64(net.space.hash()) != c.meta("space_hash"))
    throw CheckpointError(path.string() + ": stored space does not match its hash");
  if (expected && expected->hash() != net.space.hash())
    throw CheckpointError(path.string() + ": supernet was trained on a different search space (hash " +
                          c.meta("space_hash") + ", expected " + hex64(expected->hash()) + ")");
  net.check_shapes();
  return net;
}

TensorF infer(const Supernet& net, const TensorF& x, const DiscreteArch& arch) {
  Graph<float> g;
  const auto p = bind_weights(g, net.weights, false);
  return forward_arch(net.space, p, g.constant(x), arch).value();
}

TensorF infer(const Supernet& net, const TensorF& x, const ArchEncoding& enc) {
  return infer(net, x, to_discrete(enc, net.space));
}

TensorF infer(const StandaloneNet& net, const TensorF& x) {
  Graph<float> g;
  const auto p = bind_weights(g, net.weights, false);
  return forward_standalone(net.space, net.arch, p, g.constant(x)).value();
}

}  // namespace eas
