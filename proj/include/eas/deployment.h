#pragma once

#include <map>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "eas/generator.h"

namespace eas {

struct DeploymentRequest {
  int superclass = 0;
  double budget = 0;  // millions of MAdds

  nlohmann::json to_json() const;
  static DeploymentRequest from_json(const nlohmann::json& j);
};

std::vector<DeploymentRequest> load_requests(const std::filesystem::path& path);

struct DeploymentResult {
  DeploymentRequest request;
  DiscreteArch arch;
  double madds = 0;
  double accuracy = 0;  // validation accuracy on the request's superclass
  double seconds = 0;   // wall clock for this request, selection included
  int attempts = 0;     // architectures drawn
  int candidates = 0;   // feasible ones among them

  nlohmann::json to_json() const;
};

class InfeasibleBudget : public std::runtime_error {
 public:
  InfeasibleBudget(const DeploymentRequest& req, int attempts, double cheapest_seen)
      : std::runtime_error("no architecture within " + std::to_string(req.budget) + "M MAdds for superclass " +
                           std::to_string(req.superclass) + " after " + std::to_string(attempts) +
                           " attempts (cheapest drawn: " + std::to_string(cheapest_seen) + "M)"),
        request(req),
        attempts(attempts),
        cheapest_seen(cheapest_seen) {}
  DeploymentRequest request;
  int attempts;
  double cheapest_seen;
};

/// Superclass accuracy of sub-networks on a fixed, seeded subset of a split,
/// memoised by (superclass, architecture). Safe to share between threads.
class AccuracyEvaluator {
 public:
  AccuracyEvaluator(const Supernet& net, const Split& split, const SuperclassPartition& partition,
                    std::size_t per_superclass, std::uint64_t seed, std::size_t batch_size = 64);

  double operator()(int superclass, const DiscreteArch& arch);
  const SuperclassPartition& partition() const { return partition_; }
  const Supernet& supernet() const { return net_; }
  std::size_t evaluations() const;
  std::size_t cache_hits() const;

 private:
  const Supernet& net_;
  const Split& split_;
  SuperclassPartition partition_;
  std::vector<std::vector<std::size_t>> subsets_;
  std::size_t batch_size_;
  mutable std::mutex mu_;
  std::map<std::pair<int, std::string>, double> cache_;
  std::size_t evaluations_ = 0;
  std::size_t hits_ = 0;
};

struct DeployConfig {
  int pool_size = 16;
  int attempt_cap = 256;
  /// Temperature for sampling; <= 0 uses the generator's own tau.
  double tau = 0;

  nlohmann::json to_json() const;
  static DeployConfig from_json(const nlohmann::json& j);
};

/// Draws from the generator until `pool_size` candidates satisfy
/// madds <= budget or `attempt_cap` draws were made, then returns the most
/// accurate candidate (ties: larger cost, then earlier).
DeploymentResult generate(const DeploymentRequest& req, const Generator& gen, AccuracyEvaluator& eval,
                          const CostTable& table, const DeployConfig& config, Rng& rng);

/// One batched rollout for all requests, then independent selection per
/// request with stream rng.split(i). `rollout_seconds`, if given, receives
/// the wall clock of the batched rollout alone.
std::vector<DeploymentResult> generate_batch(const std::vector<DeploymentRequest>& reqs, const Generator& gen,
                                             AccuracyEvaluator& eval, const CostTable& table,
                                             const DeployConfig& config, const Rng& rng,
                                             double* rollout_seconds = nullptr);

/// Picks among gate probabilities already computed for `req`.
DeploymentResult select_from_probabilities(const DeploymentRequest& req, std::span<const float> p, double tau,
                                           const SearchSpace& space, AccuracyEvaluator& eval,
                                           const CostTable& table, const DeployConfig& config, Rng& rng);

struct RandomSearchConfig {
  int samples = 1;           // feasible draws compared by accuracy
  int attempt_cap = 200000;  // uniform draws rarely land near the cheapest end
};

/// Uniform architectures (uniform depth, kernel and expansion per block),
/// rejected until feasible.
DeploymentResult random_search(const DeploymentRequest& req, AccuracyEvaluator& eval, const CostTable& table,
                               const RandomSearchConfig& config, Rng& rng);

struct EvolutionConfig {
  int population = 16;
  int generations = 10;
  double mutation_rate = 0.1;  // per choice
  int attempt_cap = 200000;    // for feasible initial members and children
};

/// Elitist evolution over discrete architectures. Fitness is the evaluator's
/// accuracy; children violating the budget are discarded and redrawn.
DeploymentResult evolutionary_search(const DeploymentRequest& req, AccuracyEvaluator& eval, const CostTable& table,
                                     const EvolutionConfig& config, Rng& rng);

}  // namespace eas
