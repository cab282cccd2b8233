#include "eas/generator.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "eas/checkpoint.h"
#include "eas/optim.h"
#include "eas/trainer.h"

namespace eas {

double GeneratorConfig::anchor(int i) const {
  return budget_low + static_cast<double>(i) * (budget_high - budget_low) / static_cast<double>(anchors - 1);
}

void GeneratorConfig::validate() const {
  if (embed_dim <= 0 || hidden <= 0) throw GeneratorError("embedding and hidden sizes must be positive");
  if (anchors < 2) throw GeneratorError("need at least two budget anchors");
  if (!(budget_high > budget_low)) throw GeneratorError("budget_high must exceed budget_low");
  if (!(tau > 0)) throw GeneratorError("temperature must be positive");
  if (!(lambda >= 0)) throw GeneratorError("lambda must be non-negative");
  if (!(lr > 0)) throw GeneratorError("learning rate must be positive");
  if (steps < 0 || batch_size == 0) throw GeneratorError("steps must be >= 0 and batch size positive");
}

nlohmann::json GeneratorConfig::to_json() const {
  return {{"embed_dim", embed_dim}, {"anchors", anchors}, {"budget_low", budget_low},
          {"budget_high", budget_high}, {"hidden", hidden}, {"lambda", lambda},
          {"tau", tau}, {"lr", lr}, {"steps", steps}, {"batch_size", batch_size}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.anchors = j.value("anchors", c.anchors);
  c.budget_low = j.value("budget_low", c.budget_low);
  c.budget_high = j.value("budget_high", c.budget_high);
  c.hidden = j.value("hidden", c.hidden);
  c.lambda = j.value("lambda", c.lambda);
  c.tau = j.value("tau", c.tau);
  c.lr = j.value("lr", c.lr);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.validate();
  return c;
}

GeneratorConfig GeneratorConfig::for_space(const SearchSpace& space, const CostTable& table) {
  const double lo = arch_madds(minimal_arch(space), table, space);
  const double hi = arch_madds(largest_arch(space), table, space);
  GeneratorConfig c;
  c.budget_low = lo + 0.1 * (hi - lo);
  c.budget_high = lo + 0.9 * (hi - lo);
  const double ratio = 400.0 / (c.budget_high - c.budget_low);
  c.lambda = 0.01 * ratio * ratio;
  return c;
}

Generator Generator::create(const SearchSpace& space, const GeneratorConfig& config, int superclasses, Rng& rng) {
  config.validate();
  space.validate();
  if (superclasses <= 0) throw GeneratorError("need at least one superclass");
  Generator gen{space, config, superclasses, {}};
  const auto E = static_cast<std::size_t>(config.embed_dim), H = static_cast<std::size_t>(config.hidden);
  auto normal = [&](Shape s) {
    TensorF t(std::move(s));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.normal());
    return t;
  };
  gen.params["embed.superclass"] = normal({static_cast<std::size_t>(superclasses), E});
  gen.params["embed.budget"] = normal({static_cast<std::size_t>(config.anchors), E});
  TensorF w(Shape{4 * H, 2 * E + H});
  const double bound = 1.0 / std::sqrt(static_cast<double>(H));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(rng.uniform(-bound, bound));
  gen.params["lstm.w"] = std::move(w);
  TensorF b(Shape{4 * H});
  for (std::size_t i = H; i < 2 * H; ++i) b[i] = 1.0f;
  gen.params["lstm.b"] = std::move(b);
  const HeadLayout layout = head_layout(space);
  const std::pair<const char*, int> heads[] = {
      {"depth", layout.depth_width}, {"kernel", layout.kernel_width}, {"expand", layout.expand_width}};
  for (const auto& [name, width] : heads) {
    gen.params[std::string("head.") + name + ".w"] = TensorF(Shape{static_cast<std::size_t>(width), H});
    gen.params[std::string("head.") + name + ".b"] = TensorF(Shape{static_cast<std::size_t>(width)});
  }
  return gen;
}

BudgetWeights budget_weights(const GeneratorConfig& config, double budget) {
  BudgetWeights w;
  const int K = config.anchors;
  if (!std::isfinite(budget)) throw GeneratorError("budget must be finite");
  if (budget <= config.budget_low) {
    w.lower = w.upper = 0;
    w.clamped = budget < config.budget_low;
    return w;
  }
  if (budget >= config.budget_high) {
    w.lower = w.upper = K - 1;
    w.clamped = budget > config.budget_high;
    return w;
  }
  const double pos = (budget - config.budget_low) / (config.budget_high - config.budget_low) * (K - 1);
  w.lower = std::min(static_cast<int>(std::floor(pos)), K - 2);
  w.upper = w.lower + 1;
  w.w_upper = pos - w.lower;
  w.w_lower = 1.0 - w.w_upper;
  return w;
}

HeadLayout head_layout(const SearchSpace& space) {
  const auto units = space.gate_layout();
  HeadLayout h;
  for (const auto& u : units) {
    h.depth_width = std::max(h.depth_width, static_cast<int>(u.depth.size()));
    int k = 0, e = 0;
    for (const auto& b : u.blocks) {
      k += static_cast<int>(b.kernel.size());
      e += static_cast<int>(b.expand.size());
    }
    h.kernel_width = std::max(h.kernel_width, k);
    h.expand_width = std::max(h.expand_width, e);
  }
  const int step_width = h.depth_width + h.kernel_width + h.expand_width;
  h.source.assign(static_cast<std::size_t>(space.gate_count()), -1);
  for (std::size_t s = 0; s < units.size(); ++s) {
    const int base = static_cast<int>(s) * step_width;
    const auto& u = units[s];
    for (std::size_t j = 0; j < u.depth.size(); ++j)
      h.source[static_cast<std::size_t>(u.depth[j])] = base + static_cast<int>(j);
    int k = 0, e = 0;
    for (const auto& b : u.blocks) {
      for (int gi : b.kernel) h.source[static_cast<std::size_t>(gi)] = base + h.depth_width + k++;
      for (int gi : b.expand) h.source[static_cast<std::size_t>(gi)] = base + h.depth_width + h.kernel_width + e++;
    }
  }
  for (int s : h.source)
    if (s < 0) throw GeneratorError("gate layout leaves a gate without a generator output");
  return h;
}

TensorF gate_probabilities(const Generator& gen, std::span<const int> targets, std::span<const double> budgets) {
  Graph<float> g;
  const auto p = bind_weights(g, gen.params, false);
  auto emb = embed(g, p, gen.config, gen.superclasses, targets, budgets);
  return rollout(gen.space, gen.config, p, emb).value();
}

TensorF draw_noise(const Shape& shape, Rng& rng) {
  TensorF u(shape);
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = static_cast<float>(rng.uniform());
  // float rounding may reach exactly 0 or 1; keep the logit finite
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = std::clamp(u[i], 1e-7f, 1.0f - 1e-7f);
  return u;
}

SampledGates sample_gates(std::span<const float> p, double tau, const SearchSpace& space, Rng& rng) {
  const auto G = static_cast<std::size_t>(space.gate_count());
  if (p.size() != G) throw GeneratorError("expected " + std::to_string(G) + " probabilities, got " + std::to_string(p.size()));
  SampledGates s;
  s.noise.resize(G);
  s.soft.resize(G);
  s.hard.resize(G);
  for (std::size_t i = 0; i < G; ++i) {
    const double u = rng.uniform();
    const double pc = std::clamp(static_cast<double>(p[i]), 1e-6, 1.0 - 1e-6);
    const double z = (std::log(pc / (1.0 - pc)) + std::log(u / (1.0 - u))) / tau;
    s.noise[i] = u;
    s.soft[i] = 1.0 / (1.0 + std::exp(-z));
    s.hard[i] = s.soft[i] > 0.5 ? 1 : 0;
  }
  s.encoding = normalize(s.hard, space);
  return s;
}

std::string GeneratorLog::csv() const {
  std::ostringstream os;
  os << "step,superclass,budget,ce,cost,loss\n" << std::setprecision(8);
  for (const auto& s : steps)
    os << s.step << ',' << s.superclass << ',' << s.budget << ',' << s.ce << ',' << s.cost << ',' << s.loss << '\n';
  return os.str();
}

void GeneratorLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write generator log " + path.string());
  out << csv();
}

namespace {

[[noreturn]] void diverged(const Generator& gen, const GeneratorTrainOptions& options, int step, const std::string& why) {
  auto path = options.divergence_checkpoint;
  if (path.empty()) path = std::filesystem::temp_directory_path() / "eas_generator_diverged.ckpt";
  save_generator(path, gen, {{"diverged_step", std::to_string(step)}});
  throw TrainingDiverged("generator training diverged at step " + std::to_string(step) + ": " + why +
                             "; parameters saved to " + path.string(),
                         path);
}

}  // namespace

GeneratorLog train_generator(Generator& gen, const Supernet& net, const Dataset& data,
                             const SuperclassPartition& partition, const CostTable& table, const Rng& rng,
                             const GeneratorTrainOptions& options) {
  gen.config.validate();
  data.check_partition(partition);
  if (!(gen.space == net.space)) throw GeneratorError("generator and supernet use different search spaces");
  if (gen.superclasses != partition.size())
    throw GeneratorError("generator was built for " + std::to_string(gen.superclasses) + " superclasses, partition has " +
                         std::to_string(partition.size()));

  std::vector<std::vector<std::size_t>> pools;
  for (int t = 0; t < partition.size(); ++t) {
    pools.push_back(data.val.indices_of(partition.classes(t)));
    if (pools.back().empty())
      throw DatasetError("superclass '" + partition.superclasses[static_cast<std::size_t>(t)].name +
                         "' has no validation samples");
  }

  Rng t_rng = rng.split("superclass");
  Rng batch_rng = rng.split("batch");
  Rng budget_rng = rng.split("budget");
  Rng noise_rng = rng.split("gumbel");
  Optimizer opt(OptimizerConfig::adam(gen.config.lr));
  const auto G = static_cast<std::size_t>(gen.space.gate_count());

  GeneratorLog log;
  for (int step = 0; step < gen.config.steps; ++step) {
    const int t = static_cast<int>(t_rng.index(static_cast<std::size_t>(partition.size())));
    auto& pool = pools[static_cast<std::size_t>(t)];
    const std::size_t n = std::min(gen.config.batch_size, pool.size());
    // partial Fisher-Yates: the first n entries become the batch
    for (std::size_t i = 0; i < n; ++i) std::swap(pool[i], pool[i + batch_rng.index(pool.size() - i)]);
    const std::span<const std::size_t> idx(pool.data(), n);
    const double budget = budget_rng.uniform(gen.config.budget_low, gen.config.budget_high);
    const TensorF u = draw_noise(Shape{1, G}, noise_rng);

    Graph<float> g;
    const auto p = g.parameters(gen.params);
    const auto w = bind_weights(g, net.weights, false);
    const int targets[1] = {t};
    const double budgets[1] = {budget};
    auto probs = rollout(gen.space, gen.config, p, embed(g, p, gen.config, gen.superclasses, targets, budgets));
    auto gates = relax_gates(probs, u, gen.config.tau, gen.space);
    const std::vector<int> labels = data.val.batch_labels(idx);
    auto loss = joint_loss(gen.space, w, g.constant(data.val.batch(idx)), labels, partition.classes(t), gates.hard,
                           table, budget, gen.config.lambda);

    GeneratorStep rec{step, t, budget, loss.ce.value().item(), loss.cost.value().item(), loss.total.value().item()};
    if (!std::isfinite(rec.loss)) diverged(gen, options, step, "loss is " + std::to_string(rec.loss));
    const auto grads = g.backward(loss.total);
    try {
      opt.step(gen.params, grads);
    } catch (const NonFiniteGradient& e) {
      diverged(gen, options, step, e.what());
    }
    log.steps.push_back(rec);
    if (options.on_step) options.on_step(rec);
  }
  return log;
}

void save_generator(const std::filesystem::path& path, const Generator& gen,
                    std::map<std::string, std::string> metadata) {
  Checkpoint c;
  c.metadata = std::move(metadata);
  c.metadata["kind"] = "generator";
  c.metadata["space"] = gen.space.to_json().dump();
  c.metadata["space_hash"] = std::to_string(gen.space.hash());
  c.metadata["config"] = gen.config.to_json().dump();
  c.metadata["superclasses"] = std::to_string(gen.superclasses);
  c.tensors = gen.params;
  save_checkpoint(path, c);
}

Generator load_generator(const std::filesystem::path& path, const SearchSpace* expected) {
  const Checkpoint c = load_checkpoint(path);
  if (c.meta("kind") != "generator") throw CheckpointError(path.string() + ": not a generator checkpoint");
  Generator gen;
  gen.space = SearchSpace::from_json(nlohmann::json::parse(c.meta("space")));
  gen.config = GeneratorConfig::from_json(nlohmann::json::parse(c.meta("config")));
  gen.superclasses = std::stoi(c.meta("superclasses"));
  if (expected && expected->hash() != gen.space.hash())
    throw CheckpointError(path.string() + ": generator belongs to a different search space");
  Rng dummy(0);
  const Generator shape_ref = Generator::create(gen.space, gen.config, gen.superclasses, dummy);
  for (const auto& [name, t] : shape_ref.params) {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw CheckpointError(path.string() + ": missing tensor '" + name + "'");
    if (it->second.shape() != t.shape())
      throw CheckpointError(path.string() + ": tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                            ", expected " + shape_str(t.shape()));
  }
  gen.params = c.tensors;
  return gen;
}

}  // namespace eas
