#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "eas/cost_model.h"
#include "eas/dataset.h"
#include "eas/partition.h"
#include "eas/rng.h"
#include "eas/supernet.h"

namespace eas {

class GeneratorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GeneratorConfig {
  int embed_dim = 32;         // per embedding; the rollout input is twice this
  int anchors = 10;           // budget anchors on [budget_low, budget_high]
  double budget_low = 150.0;  // millions of MAdds
  double budget_high = 550.0;
  int hidden = 64;
  double lambda = 0.01;
  double tau = 1.0;
  double lr = 1e-3;
  int steps = 1000;            // optimisation steps of train_generator
  std::size_t batch_size = 32;  // validation samples per step

  double anchor(int i) const;
  void validate() const;
  nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);

  /// Budget range placed inside the space's real cost range at the same
  /// relative positions as [150, 550] inside a 100..600-ish range: 10% and
  /// 90% of the way from the minimal to the largest architecture. lambda is
  /// rescaled so lambda * (B_H - B_L)^2 is unchanged from 0.01 * 400^2.
  static GeneratorConfig for_space(const SearchSpace& space, const CostTable& table);
};

/// Learned state of G(B, t; theta). Parameter names:
///   embed.superclass [T, E], embed.budget [K, E]
///   lstm.w [4H, 2E + H], lstm.b [4H]         (gate order i, f, g, o)
///   head.{depth,kernel,expand}.{w,b}         (shared across unrolled steps)
struct Generator {
  SearchSpace space;
  GeneratorConfig config;
  int superclasses = 0;
  ParameterMap<float> params;

  /// Embeddings N(0,1), recurrent weights U(-1/sqrt(H), 1/sqrt(H)) with a
  /// forget bias of 1, heads zero so every initial probability is 0.5.
  static Generator create(const SearchSpace& space, const GeneratorConfig& config, int superclasses, Rng& rng);
};

/// Interpolation between the two anchors around a budget.
struct BudgetWeights {
  int lower = 0;
  int upper = 0;
  double w_lower = 1.0;
  double w_upper = 0.0;
  bool clamped = false;  // the budget lay outside [budget_low, budget_high]
};
BudgetWeights budget_weights(const GeneratorConfig& config, double budget);

/// Which head column feeds each gate: per unrolled step, the depth head's
/// first columns give that unit's depth gates, the kernel and expansion heads
/// give its blocks' gates block-major.
struct HeadLayout {
  int depth_width = 0;
  int kernel_width = 0;
  int expand_width = 0;
  /// For gate i: index into the concatenation over steps of
  /// [depth | kernel | expand] head outputs.
  std::vector<int> source;
};
HeadLayout head_layout(const SearchSpace& space);

// ---------------------------------------------------------------------------
// Graph-level building blocks (templated for double-precision checks)
// ---------------------------------------------------------------------------

/// out[:, j] = in[:, index[j]]; backward scatters and adds.
template <typename T>
Var<T> select_columns(Var<T> in, const std::vector<int>& index) {
  if (in.shape().size() != 2) throw ShapeError("select_columns", "expected rank 2, got " + shape_str(in.shape()));
  const std::size_t rows = in.shape()[0], cols = in.shape()[1], out_cols = index.size();
  for (int i : index)
    if (i < 0 || static_cast<std::size_t>(i) >= cols) throw ShapeError("select_columns", "column out of range");
  const Tensor<T>& x = in.value();
  Tensor<T> y(Shape{rows, out_cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < out_cols; ++j) y[r * out_cols + j] = x[r * cols + static_cast<std::size_t>(index[j])];
  return in.graph->record("select_columns", std::move(y), {in.id},
                          [in_id = in.id, index, rows, cols, out_cols](Graph<T>& g, int self) {
                            if (!g.requires_grad(in_id)) return;
                            const Tensor<T>& dy = g.grad_buffer(self);
                            Tensor<T>& dx = g.grad_buffer(in_id);
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < out_cols; ++j)
                                dx[r * cols + static_cast<std::size_t>(index[j])] += dy[r * out_cols + j];
                          });
}

/// Prefix products inside every thermometer group, applied to each row of
/// gates [rows, G] (or a flat [G]). Gradients reach every factor.
template <typename T>
Var<T> nest_gates(Var<T> gates, const std::vector<std::vector<int>>& groups, std::size_t gate_count) {
  const Tensor<T>& x = gates.value();
  if (x.size() % gate_count != 0)
    throw ShapeError("nest_gates", shape_str(x.shape()) + " is not a multiple of " + std::to_string(gate_count));
  const std::size_t rows = x.size() / gate_count;
  Tensor<T> y = x;
  for (std::size_t r = 0; r < rows; ++r)
    for (const auto& grp : groups) {
      T run = T{1};
      for (int i : grp) {
        run = run * x[r * gate_count + static_cast<std::size_t>(i)];
        y[r * gate_count + static_cast<std::size_t>(i)] = run;
      }
    }
  return gates.graph->record(
      "nest_gates", std::move(y), {gates.id}, [g_id = gates.id, groups, gate_count, rows](Graph<T>& g, int self) {
        if (!g.requires_grad(g_id)) return;
        const Tensor<T>& xv = g.value(g_id);
        const Tensor<T>& dy = g.grad_buffer(self);
        Tensor<T>& dx = g.grad_buffer(g_id);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t o = r * gate_count;
          for (const auto& grp : groups)
            for (std::size_t j = 0; j < grp.size(); ++j) {
              // d out_k / d x_j = product of x_i for i <= k, i != j
              T acc = T{0};
              for (std::size_t k = j; k < grp.size(); ++k) {
                T prod = T{1};
                for (std::size_t i = 0; i <= k; ++i)
                  if (i != j) prod = prod * xv[o + static_cast<std::size_t>(grp[i])];
                acc += dy[o + static_cast<std::size_t>(grp[k])] * prod;
              }
              dx[o + static_cast<std::size_t>(grp[j])] += acc;
            }
        }
      });
}

/// Rows of budget interpolation weights [M, K] and superclass one-hots [M, T].
template <typename T>
Var<T> embed(Graph<T>& g, const VarMap<T>& p, const GeneratorConfig& config, int superclasses,
             std::span<const int> targets, std::span<const double> budgets) {
  if (targets.size() != budgets.size() || targets.empty())
    throw GeneratorError("embed: need one budget per superclass request");
  const std::size_t m = targets.size();
  Tensor<T> onehot(Shape{m, static_cast<std::size_t>(superclasses)});
  Tensor<T> interp(Shape{m, static_cast<std::size_t>(config.anchors)});
  for (std::size_t r = 0; r < m; ++r) {
    if (targets[r] < 0 || targets[r] >= superclasses)
      throw GeneratorError("embed: unknown superclass " + std::to_string(targets[r]));
    onehot[r * static_cast<std::size_t>(superclasses) + static_cast<std::size_t>(targets[r])] = T{1};
    const BudgetWeights w = budget_weights(config, budgets[r]);
    interp[r * static_cast<std::size_t>(config.anchors) + static_cast<std::size_t>(w.lower)] += static_cast<T>(w.w_lower);
    interp[r * static_cast<std::size_t>(config.anchors) + static_cast<std::size_t>(w.upper)] += static_cast<T>(w.w_upper);
  }
  auto sc = matmul(g.constant(onehot, "superclass_onehot"), p.at("embed.superclass"));
  auto bu = matmul(g.constant(interp, "budget_weights"), p.at("embed.budget"));
  return concat(std::vector<Var<T>>{sc, bu}, 1);
}

/// Unrolls the recurrent cell once per unit, feeding the same embedding at
/// every step, and returns gate probabilities [M, G] in gate-index order.
template <typename T>
Var<T> rollout(const SearchSpace& space, const GeneratorConfig& config, const VarMap<T>& p, Var<T> emb) {
  Graph<T>& g = *emb.graph;
  const std::size_t m = emb.shape()[0];
  const auto H = static_cast<std::size_t>(config.hidden);
  auto h = g.constant(Tensor<T>(Shape{m, H}), "h0");
  auto c = g.constant(Tensor<T>(Shape{m, H}), "c0");
  const HeadLayout layout = head_layout(space);
  std::vector<Var<T>> outs;
  for (std::size_t step = 0; step < space.units.size(); ++step) {
    auto z = linear(concat(std::vector<Var<T>>{emb, h}, 1), p.at("lstm.w"), p.at("lstm.b"));
    auto i = sigmoid(narrow(z, 1, 0, H));
    auto f = sigmoid(narrow(z, 1, H, H));
    auto cand = tanh(narrow(z, 1, 2 * H, H));
    auto o = sigmoid(narrow(z, 1, 3 * H, H));
    c = add(mul(f, c), mul(i, cand));
    h = mul(o, tanh(c));
    outs.push_back(linear(h, p.at("head.depth.w"), p.at("head.depth.b")));
    outs.push_back(linear(h, p.at("head.kernel.w"), p.at("head.kernel.b")));
    outs.push_back(linear(h, p.at("head.expand.w"), p.at("head.expand.b")));
  }
  return sigmoid(select_columns(concat(outs, 1), layout.source));
}

template <typename T>
struct RelaxedGates {
  Var<T> soft;      // nested soft relaxation
  Var<T> hard;      // nested 0/1 values whose gradient is the soft one's
  Var<T> raw_soft;  // soft relaxation before nesting
};

/// Gumbel-sigmoid relaxation at frozen noise u (same shape as p):
///   soft = sigmoid((log(p/(1-p)) + log(u/(1-u))) / tau),  hard = [soft > 0.5]
/// followed by nesting. p is clamped to [1e-6, 1 - 1e-6] first.
template <typename T>
RelaxedGates<T> relax_gates(Var<T> p, const Tensor<T>& u, double tau, const SearchSpace& space) {
  if (u.shape() != p.shape()) throw ShapeError("relax_gates", "noise " + shape_str(u.shape()) + " vs p " + shape_str(p.shape()));
  Graph<T>& g = *p.graph;
  Tensor<T> noise_logit(u.shape());
  for (std::size_t i = 0; i < u.size(); ++i) noise_logit[i] = std::log(u[i] / (T{1} - u[i]));
  auto pc = clamp(p, static_cast<T>(1e-6), static_cast<T>(1 - 1e-6));
  auto logit = sub(log(pc), log(rsub_scalar(T{1}, pc)));
  auto soft = sigmoid(scale(add(logit, g.constant(noise_logit, "gumbel")), static_cast<T>(1.0 / tau)));
  const auto groups = space.gate_groups();
  const auto G = static_cast<std::size_t>(space.gate_count());
  return {nest_gates(soft, groups, G), nest_gates(straight_through(soft), groups, G), soft};
}

template <typename T>
struct JointLoss {
  Var<T> total;
  Var<T> ce;
  Var<T> cost;  // millions of MAdds
};

/// CE of the gated supernet on a batch of superclass-t samples (softmax
/// restricted to t's classes) plus lambda * (R(gates) - B)^2.
template <typename T>
JointLoss<T> joint_loss(const SearchSpace& space, const VarMap<T>& supernet, Var<T> x, std::span<const int> labels,
                        const std::vector<int>& target_classes, Var<T> gates, const CostTable& table, double budget,
                        double lambda) {
  const std::size_t n = x.shape()[0];
  const auto C = static_cast<std::size_t>(space.head.classes);
  Tensor<T> keep(Shape{n, C});
  for (std::size_t r = 0; r < n; ++r)
    for (int c : target_classes) keep[r * C + static_cast<std::size_t>(c)] = T{1};
  auto flat = gates.shape().size() == 1 ? gates : reshape(gates, Shape{gates.size()});
  auto ce = masked_cross_entropy(forward_gated(space, supernet, x, flat), keep, labels);
  auto cost = madds_differentiable(flat, table);
  auto gap = add_scalar(cost, static_cast<T>(-budget));
  auto total = add(ce, scale(square(gap), static_cast<T>(lambda)));
  return {total, ce, cost};
}

// ---------------------------------------------------------------------------
// Inference-side helpers
// ---------------------------------------------------------------------------

/// Gate probabilities [M, G] for M requests in one batched rollout.
TensorF gate_probabilities(const Generator& gen, std::span<const int> targets, std::span<const double> budgets);

/// One Gumbel draw per gate.
struct SampledGates {
  std::vector<double> noise;  // u in (0, 1)
  std::vector<double> soft;
  std::vector<std::uint8_t> hard;  // before nesting
  ArchEncoding encoding;           // nested
};
SampledGates sample_gates(std::span<const float> p, double tau, const SearchSpace& space, Rng& rng);

/// Draws u ~ U(0,1) for every entry of a [rows, G] probability tensor.
TensorF draw_noise(const Shape& shape, Rng& rng);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct GeneratorStep {
  int step = 0;
  int superclass = 0;
  double budget = 0;
  double ce = 0;
  double cost = 0;
  double loss = 0;
};

struct GeneratorLog {
  std::vector<GeneratorStep> steps;
  std::string csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

struct GeneratorTrainOptions {
  std::filesystem::path divergence_checkpoint;
  std::function<void(const GeneratorStep&)> on_step;
};

/// Algorithm: per step draw t uniformly, a batch from t's validation
/// samples and B ~ U(budget_low, budget_high); Adam on the joint loss with
/// the supernet frozen. Streams: "superclass", "batch", "budget", "gumbel".
GeneratorLog train_generator(Generator& gen, const Supernet& net, const Dataset& data,
                             const SuperclassPartition& partition, const CostTable& table, const Rng& rng,
                             const GeneratorTrainOptions& options = {});

void save_generator(const std::filesystem::path& path, const Generator& gen,
                    std::map<std::string, std::string> metadata = {});
Generator load_generator(const std::filesystem::path& path, const SearchSpace* expected = nullptr);

}  // namespace eas
