#include "eas/deployment.h"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <limits>

#include "eas/evaluate.h"

namespace eas {
namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void check_request(const DeploymentRequest& req, int superclasses) {
  if (req.superclass < 0 || req.superclass >= superclasses)
    throw std::invalid_argument("request names unknown superclass " + std::to_string(req.superclass));
  if (!(req.budget > 0) || !std::isfinite(req.budget))
    throw std::invalid_argument("request budget must be positive, got " + std::to_string(req.budget));
}

struct Candidate {
  DiscreteArch arch;
  double madds = 0;
  double accuracy = 0;
};

/// Most accurate; ties go to the candidate using more of the budget, then the
/// earlier one. A small selection subset ties often once accuracy saturates.
const Candidate& best_of(const std::vector<Candidate>& pool) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < pool.size(); ++i) {
    const auto& a = pool[i];
    const auto& b = pool[best];
    if (a.accuracy > b.accuracy || (a.accuracy == b.accuracy && a.madds > b.madds)) best = i;
  }
  return pool[best];
}

DeploymentResult finish(const DeploymentRequest& req, const Candidate& c, int attempts, int candidates,
                        Clock::time_point t0) {
  DeploymentResult r;
  r.request = req;
  r.arch = c.arch;
  r.madds = c.madds;
  r.accuracy = c.accuracy;
  r.attempts = attempts;
  r.candidates = candidates;
  r.seconds = since(t0);
  return r;
}

}  // namespace

nlohmann::json DeploymentRequest::to_json() const { return {{"superclass", superclass}, {"budget_madds_m", budget}}; }

DeploymentRequest DeploymentRequest::from_json(const nlohmann::json& j) {
  DeploymentRequest r;
  r.superclass = j.at("superclass").get<int>();
  r.budget = j.at("budget_madds_m").get<double>();
  return r;
}

std::vector<DeploymentRequest> load_requests(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open requests file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw std::runtime_error(path.string() + ": expected a JSON array of requests");
  std::vector<DeploymentRequest> out;
  for (const auto& r : j) out.push_back(DeploymentRequest::from_json(r));
  return out;
}

nlohmann::json DeploymentResult::to_json() const {
  return {{"superclass", request.superclass},
          {"budget_madds_m", request.budget},
          {"arch", arch.to_json()},
          {"arch_key", arch.key()},
          {"madds_m", madds},
          {"accuracy", accuracy},
          {"elapsed_seconds", seconds},
          {"attempts", attempts},
          {"candidates", candidates}};
}

AccuracyEvaluator::AccuracyEvaluator(const Supernet& net, const Split& split, const SuperclassPartition& partition,
                                     std::size_t per_superclass, std::uint64_t seed, std::size_t batch_size)
    : net_(net), split_(split), partition_(partition), batch_size_(batch_size) {
  for (int t = 0; t < partition.size(); ++t) {
    subsets_.push_back(superclass_subset(split, partition, t, per_superclass, seed));
    if (subsets_.back().empty())
      throw DatasetError("superclass '" + partition.superclasses[static_cast<std::size_t>(t)].name +
                         "' has no samples in the evaluation split");
  }
}

double AccuracyEvaluator::operator()(int superclass, const DiscreteArch& arch) {
  if (superclass < 0 || superclass >= partition_.size())
    throw std::invalid_argument("unknown superclass " + std::to_string(superclass));
  auto key = std::make_pair(superclass, arch.key());
  {
    std::lock_guard<std::mutex> lock(mu_);
    if (auto it = cache_.find(key); it != cache_.end()) {
      ++hits_;
      return it->second;
    }
  }
  const double acc = superclass_accuracy(net_, arch, split_, subsets_[static_cast<std::size_t>(superclass)],
                                         partition_.classes(superclass), batch_size_);
  std::lock_guard<std::mutex> lock(mu_);
  ++evaluations_;
  cache_.emplace(std::move(key), acc);
  return acc;
}

std::size_t AccuracyEvaluator::evaluations() const {
  std::lock_guard<std::mutex> lock(mu_);
  return evaluations_;
}

std::size_t AccuracyEvaluator::cache_hits() const {
  std::lock_guard<std::mutex> lock(mu_);
  return hits_;
}

nlohmann::json DeployConfig::to_json() const {
  return {{"pool_size", pool_size}, {"attempt_cap", attempt_cap}, {"tau", tau}};
}

DeployConfig DeployConfig::from_json(const nlohmann::json& j) {
  DeployConfig c;
  c.pool_size = j.value("pool_size", c.pool_size);
  c.attempt_cap = j.value("attempt_cap", c.attempt_cap);
  c.tau = j.value("tau", c.tau);
  if (c.pool_size < 1 || c.attempt_cap < 1) throw std::invalid_argument("pool_size and attempt_cap must be >= 1");
  return c;
}

DeploymentResult select_from_probabilities(const DeploymentRequest& req, std::span<const float> p, double tau,
                                           const SearchSpace& space, AccuracyEvaluator& eval,
                                           const CostTable& table, const DeployConfig& config, Rng& rng) {
  const auto t0 = Clock::now();
  std::vector<Candidate> pool;
  int attempts = 0;
  double cheapest = std::numeric_limits<double>::infinity();
  while (attempts < config.attempt_cap && static_cast<int>(pool.size()) < config.pool_size) {
    ++attempts;
    const SampledGates s = sample_gates(p, tau, space, rng);
    const double cost = madds(s.encoding, table, space);
    cheapest = std::min(cheapest, cost);
    if (cost <= req.budget) pool.push_back({to_discrete(s.encoding, space), cost, 0.0});
  }
  if (pool.empty()) throw InfeasibleBudget(req, attempts, cheapest);
  for (auto& c : pool) c.accuracy = eval(req.superclass, c.arch);
  return finish(req, best_of(pool), attempts, static_cast<int>(pool.size()), t0);
}

DeploymentResult generate(const DeploymentRequest& req, const Generator& gen, AccuracyEvaluator& eval,
                          const CostTable& table, const DeployConfig& config, Rng& rng) {
  check_request(req, gen.superclasses);
  const auto t0 = Clock::now();
  const int t[] = {req.superclass};
  const double b[] = {req.budget};
  const TensorF p = gate_probabilities(gen, t, b);
  const double tau = config.tau > 0 ? config.tau : gen.config.tau;
  DeploymentResult r = select_from_probabilities(req, std::span<const float>(p.data(), p.size()), tau, gen.space,
                                                 eval, table, config, rng);
  r.seconds = since(t0);
  return r;
}

std::vector<DeploymentResult> generate_batch(const std::vector<DeploymentRequest>& reqs, const Generator& gen,
                                             AccuracyEvaluator& eval, const CostTable& table,
                                             const DeployConfig& config, const Rng& rng, double* rollout_seconds) {
  if (reqs.empty()) return {};
  std::vector<int> targets;
  std::vector<double> budgets;
  for (const auto& r : reqs) {
    check_request(r, gen.superclasses);
    targets.push_back(r.superclass);
    budgets.push_back(r.budget);
  }
  const auto t0 = Clock::now();
  const TensorF p = gate_probabilities(gen, targets, budgets);
  const double rollout = since(t0);
  if (rollout_seconds) *rollout_seconds = rollout;

  const auto G = static_cast<std::size_t>(gen.space.gate_count());
  const double tau = config.tau > 0 ? config.tau : gen.config.tau;
  std::vector<DeploymentResult> out;
  for (std::size_t i = 0; i < reqs.size(); ++i) {
    Rng stream = rng.split(static_cast<std::uint64_t>(i));
    out.push_back(select_from_probabilities(reqs[i], std::span<const float>(p.data() + i * G, G), tau, gen.space,
                                            eval, table, config, stream));
    // each request is charged an equal share of the shared rollout
    out.back().seconds += rollout / static_cast<double>(reqs.size());
  }
  return out;
}

DeploymentResult random_search(const DeploymentRequest& req, AccuracyEvaluator& eval, const CostTable& table,
                               const RandomSearchConfig& config, Rng& rng) {
  const SearchSpace& space = eval.supernet().space;
  check_request(req, eval.partition().size());
  const auto t0 = Clock::now();
  std::vector<Candidate> pool;
  int attempts = 0;
  double cheapest = std::numeric_limits<double>::infinity();
  while (attempts < config.attempt_cap && static_cast<int>(pool.size()) < std::max(config.samples, 1)) {
    ++attempts;
    DiscreteArch a = sample_arch(space, ElasticDims::all(), rng);
    const double cost = arch_madds(a, table, space);
    cheapest = std::min(cheapest, cost);
    if (cost <= req.budget) pool.push_back({std::move(a), cost, 0.0});
  }
  if (pool.empty()) throw InfeasibleBudget(req, attempts, cheapest);
  for (auto& c : pool) c.accuracy = eval(req.superclass, c.arch);
  return finish(req, best_of(pool), attempts, static_cast<int>(pool.size()), t0);
}

namespace {

DiscreteArch crossover(const DiscreteArch& a, const DiscreteArch& b, Rng& rng) {
  DiscreteArch child;
  for (std::size_t u = 0; u < a.units.size(); ++u) child.units.push_back(rng.bernoulli(0.5) ? a.units[u] : b.units[u]);
  return child;
}

void mutate(DiscreteArch& arch, const SearchSpace& space, double rate, Rng& rng) {
  auto pick = [&](const std::vector<int>& choices) { return choices[rng.index(choices.size())]; };
  for (auto& unit : arch.units) {
    if (rng.bernoulli(rate)) {
      const int depth = pick(space.depth_choices);
      while (static_cast<int>(unit.blocks.size()) < depth)
        unit.blocks.push_back({pick(space.kernel_choices), pick(space.expand_choices)});
      unit.blocks.resize(static_cast<std::size_t>(depth));
      unit.depth = depth;
    }
    for (auto& b : unit.blocks) {
      if (rng.bernoulli(rate)) b.kernel = pick(space.kernel_choices);
      if (rng.bernoulli(rate)) b.expand = pick(space.expand_choices);
    }
  }
}

}  // namespace

DeploymentResult evolutionary_search(const DeploymentRequest& req, AccuracyEvaluator& eval, const CostTable& table,
                                     const EvolutionConfig& config, Rng& rng) {
  const SearchSpace& space = eval.supernet().space;
  check_request(req, eval.partition().size());
  if (config.population < 1 || config.generations < 0)
    throw std::invalid_argument("evolution needs population >= 1 and generations >= 0");
  const auto t0 = Clock::now();
  int attempts = 0;
  double cheapest = std::numeric_limits<double>::infinity();
  auto feasible = [&](const DiscreteArch& a, double& cost) {
    ++attempts;
    cost = arch_madds(a, table, space);
    cheapest = std::min(cheapest, cost);
    return cost <= req.budget;
  };

  std::vector<Candidate> population;
  while (static_cast<int>(population.size()) < config.population) {
    if (attempts >= config.attempt_cap) break;
    DiscreteArch a = sample_arch(space, ElasticDims::all(), rng);
    double cost = 0;
    if (feasible(a, cost)) population.push_back({std::move(a), cost, 0.0});
  }
  if (population.empty()) throw InfeasibleBudget(req, attempts, cheapest);
  for (auto& c : population) c.accuracy = eval(req.superclass, c.arch);
  int evaluated = static_cast<int>(population.size());

  auto rank = [](std::vector<Candidate>& v) {
    std::stable_sort(v.begin(), v.end(), [](const Candidate& a, const Candidate& b) {
      return a.accuracy > b.accuracy || (a.accuracy == b.accuracy && a.madds < b.madds);
    });
  };
  rank(population);
  const std::size_t parents = std::max<std::size_t>(1, population.size() / 2);
  for (int gen = 0; gen < config.generations; ++gen) {
    std::vector<Candidate> children;
    while (children.size() < population.size() && attempts < config.attempt_cap) {
      const auto& a = population[rng.index(parents)].arch;
      const auto& b = population[rng.index(parents)].arch;
      DiscreteArch child = crossover(a, b, rng);
      mutate(child, space, config.mutation_rate, rng);
      double cost = 0;
      if (feasible(child, cost)) children.push_back({std::move(child), cost, 0.0});
    }
    for (auto& c : children) c.accuracy = eval(req.superclass, c.arch);
    evaluated += static_cast<int>(children.size());
    const std::size_t keep = population.size();
    population.insert(population.end(), std::make_move_iterator(children.begin()),
                      std::make_move_iterator(children.end()));
    rank(population);
    population.resize(keep);
  }
  return finish(req, population.front(), attempts, evaluated, t0);
}

}  // namespace eas
