#pragma once

#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "common/tensor.hpp"

namespace voxelseg::nn {

template <typename T>
class Graph;

/// Handle to a value recorded on a Graph.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, int id) : graph_(graph), id_(id) {}

  Graph<T>* graph() const noexcept { return graph_; }
  int id() const noexcept { return id_; }
  explicit operator bool() const noexcept { return graph_ != nullptr; }

  const Tensor<T>& value() const { return graph_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return graph_->requires_grad(id_); }
  /// Gradient after Graph::backward; empty when none reached this node.
  const Tensor<T>& grad() const { return graph_->grad(id_); }

 private:
  Graph<T>* graph_ = nullptr;
  int id_ = -1;
};

/// Append-only tape for reverse-mode differentiation. Nodes are stored in
/// creation order, which is a topological order, so backward is a single
/// reverse sweep.
template <typename T>
class Graph {
 public:
  /// Called with the node's own id; reads grad(self) and value(self).
  using Backward = std::function<void(Graph&, int self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}); }
  Var<T> parameter(Tensor<T> value) { return push(std::move(value), true, {}); }

  /// Records an op result. The backward closure runs only if some input
  /// requires a gradient. `op` must be a string literal.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
    bool needs = false;
    std::vector<int> ids;
    for (const auto& v : inputs) {
      needs = needs || requires_grad(v.id());
      ids.push_back(v.id());
    }
    Var<T> out = push(std::move(value), needs, needs ? std::move(backward) : Backward{});
    nodes_.back().op = op;
    nodes_.back().inputs = std::move(ids);
    return out;
  }

  const Tensor<T>& value(int id) const { return nodes_.at(id).value; }
  bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }
  const Tensor<T>& grad(int id) const { return nodes_.at(id).grad; }
  /// Op name of a recorded node; "" for leaves.
  const char* op(int id) const { return nodes_.at(id).op; }
  const std::vector<int>& inputs(int id) const { return nodes_.at(id).inputs; }

  /// Gradient buffer of a node, zero-initialized on first access. Returns
  /// nullptr for nodes that do not require a gradient.
  Tensor<T>* grad_buffer(int id) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape(), T(0));
    return &n.grad;
  }
  Tensor<T>* grad_buffer(const Var<T>& v) { return grad_buffer(v.id()); }

  /// Seeds the (single-element) root with 1 and propagates.
  void backward(const Var<T>& root) {
    require(root.value().size() == 1, ErrorCode::ShapeMismatch, "backward root must be a scalar");
    Tensor<T>* g = grad_buffer(root.id());
    if (!g) return;
    (*g)[0] += T(1);
    for (int id = root.id(); id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.backward && !n.grad.empty()) n.backward(*this, id);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
    const char* op = "";
    std::vector<int> inputs;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, requires_grad, std::move(backward), "", {}});
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::deque<Node> nodes_;
};

}  // namespace voxelseg::nn
