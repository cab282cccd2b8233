#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "eas/tensor.h"

namespace eas {

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Tensor<T>& value() const { return graph->value(*this); }
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
};

template <typename T>
using ParameterMap = std::map<std::string, Tensor<T>>;

/// Optional wall-clock accounting per op name. Forward time is charged to an
/// op when it is recorded: everything since the previous node was pushed.
struct OpProfile {
  struct Entry {
    double forward = 0;
    double backward = 0;
    long calls = 0;
  };
  std::map<std::string, Entry> ops;
};

struct BackwardOptions {
  /// When set, straight-through estimator nodes pass no gradient. Used by
  /// gradient checks to find parameters whose gradient depends on an estimator.
  bool block_estimators = false;
};

/// Define-by-run tape. Every op evaluates eagerly and records a closure that
/// propagates its output gradient to its inputs. Single-threaded per instance.
template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int self)>;

  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;  // allocated lazily during backward
    std::vector<int> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool estimator = false;
    std::string param_name;  // non-empty for trainable leaves
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value, std::string label = "constant") {
    return push(Node{std::move(label), std::move(value), {}, {}, {}, false, false, {}});
  }

  /// Trainable leaf. Registering the same name twice returns the same node.
  Var<T> parameter(const std::string& name, const Tensor<T>& value) {
    if (auto it = param_ids_.find(name); it != param_ids_.end()) return Var<T>{this, it->second};
    Var<T> v = push(Node{"parameter", value, {}, {}, {}, true, false, name});
    param_ids_.emplace(name, v.id);
    return v;
  }

  /// Registers every tensor of `params` as trainable and returns name -> Var.
  std::map<std::string, Var<T>> parameters(const ParameterMap<T>& params) {
    std::map<std::string, Var<T>> out;
    for (const auto& [name, t] : params) out.emplace(name, parameter(name, t));
    return out;
  }

  /// Attaches a profile that accumulates timings; nullptr detaches.
  void set_profile(OpProfile* p) {
    profile_ = p;
    last_push_ = Clock::now();
  }

  Var<T> record(std::string op, Tensor<T> value, std::vector<int> inputs, BackwardFn fn,
                bool estimator = false) {
    if (profile_) {
      auto& e = profile_->ops[op];
      e.forward += seconds_since(last_push_);
      e.calls++;
    }
    bool rg = false;
    for (int i : inputs) rg = rg || nodes_.at(i).requires_grad;
    Node n{std::move(op), std::move(value), {}, std::move(inputs), std::move(fn), rg, estimator,
           {}};
    if (!rg) n.backward = nullptr;
    return push(std::move(n));
  }

  const Tensor<T>& value(Var<T> v) const { return node(v).value; }
  const Tensor<T>& value(int id) const { return nodes_.at(id).value; }
  const std::string& op(int id) const { return nodes_.at(id).op; }
  bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  const Node& node_at(int id) const { return nodes_.at(id); }

  /// Gradient buffer of node `id`, zero-initialised on first access.
  Tensor<T>& grad_buffer(int id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  /// Adds `t` into node `id`'s gradient, adopting the tensor when nothing
  /// has arrived yet.
  void accumulate_grad(int id, Tensor<T>&& t) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      if (t.shape() != n.value.shape())
        throw GraphError("accumulate_grad: shape " + shape_str(t.shape()) + " for node of shape " +
                         shape_str(n.value.shape()));
      n.grad = std::move(t);
      return;
    }
    for (std::size_t i = 0; i < n.grad.size(); ++i) n.grad[i] += t[i];
  }

  /// Gradient of a node after backward (zeros if nothing reached it).
  Tensor<T> grad(Var<T> v) const {
    const Node& n = node(v);
    return n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad;
  }

  bool has_estimators() const {
    for (const Node& n : nodes_)
      if (n.estimator) return true;
    return false;
  }

  std::vector<std::string> estimator_labels() const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].estimator) out.push_back(nodes_[i].op + "#" + std::to_string(i));
    return out;
  }

  /// Reverse sweep from a scalar loss. Returns one gradient per trainable
  /// parameter; parameters not on a path to the loss get exact zeros. The
  /// tape is consumed: a second call requires rebuilding the graph.
  ParameterMap<T> backward(Var<T> loss, BackwardOptions opts = {}) {
    if (!loss.valid() || loss.graph != this || loss.id >= static_cast<int>(nodes_.size()))
      throw GraphError("backward: loss does not belong to a forward pass of this graph");
    if (consumed_) throw GraphError("backward: graph already consumed; run forward again");
    if (nodes_[loss.id].value.size() != 1)
      throw GraphError("backward: loss must be scalar, got shape " +
                       shape_str(nodes_[loss.id].value.shape()));
    consumed_ = true;
    grad_buffer(loss.id)[0] = T{1};
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.grad.empty() || !n.backward) continue;
      if (n.estimator && opts.block_estimators) continue;
      if (profile_) {
        const auto t0 = Clock::now();
        n.backward(*this, id);
        profile_->ops[n.op].backward += seconds_since(t0);
      } else {
        n.backward(*this, id);
      }
    }
    ParameterMap<T> grads;
    for (const auto& [name, id] : param_ids_) grads.emplace(name, grad(Var<T>{this, id}));
    return grads;
  }

  bool consumed() const { return consumed_; }

 private:
  const Node& node(Var<T> v) const {
    if (v.graph != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
      throw GraphError("invalid Var for this graph");
    return nodes_[v.id];
  }

  using Clock = std::chrono::steady_clock;
  static double seconds_since(Clock::time_point t) {
    return std::chrono::duration<double>(Clock::now() - t).count();
  }

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    if (profile_) last_push_ = Clock::now();
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<std::string, int> param_ids_;
  bool consumed_ = false;
  OpProfile* profile_ = nullptr;
  Clock::time_point last_push_{};
};

}  // namespace eas
