// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef KDFS_TAPE_HPP
#define KDFS_TAPE_HPP

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "kdfs/tensor.hpp"

namespace kdfs {

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape; }
  std::size_t numel() const { return value().numel(); }
  T item() const { return value().item(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

  /// Gradient accumulated at this node by the last backward pass, or nullptr.
  const std::vector<T>* grad() const { return tape_->grad_of(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records one forward pass for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order. `backward` walks it once in reverse. A tape is meant to
/// be used for a single forward/backward pair and then discarded.
template <typename T>
class Tape {
 public:
  /// Receives the gradient flowing into the node's output.
  using BackwardFn = std::function<void(Tape&, std::span<const T>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Binds an externally owned parameter. Gradients accumulate into `p.grad`.
  Var<T> param(Tensor<T>& p) {
    Node node;
    node.external = &p;
    node.requires_grad = true;
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  /// Records a value that never receives a gradient.
  Var<T> constant(Tensor<T> value) {
    Node node;
    node.owned = std::move(value);
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  /// Records a borrowed value that never receives a gradient. `value` must
  /// outlive the tape.
  Var<T> constant_ref(const Tensor<T>& value) {
    Node node;
    node.borrowed = &value;
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  /// Appends the result of an operation. The backward rule is kept only when
  /// at least one input requires a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
    Node node;
    node.owned = std::move(value);
    for (const Var<T>& in : inputs) {
      if (&in.tape() != this) {
        throw ContractError("operation mixes variables from different tapes");
      }
      node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    if (n.external) return *n.external;
    if (n.borrowed) return *n.borrowed;
    return n.owned;
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient buffer of node `id`, zero-allocated on first use, or nullptr
  /// when the node does not take gradients.
  std::vector<T>* grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return nullptr;
    std::vector<T>& g = n.external ? n.external->grad : n.grad;
    if (g.empty()) g.assign(value(id).numel(), T{0});
    return &g;
  }

  const std::vector<T>* grad_of(std::size_t id) const {
    const Node& n = nodes_.at(id);
    const std::vector<T>& g = n.external ? n.external->grad : n.grad;
    return g.empty() ? nullptr : &g;
  }

  std::size_t size() const { return nodes_.size(); }

  /// Populates gradients of every parameter reachable from `loss`.
  void backward(const Var<T>& loss) {
    if (&loss.tape() != this) throw ContractError("loss belongs to another tape");
    if (loss.numel() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (!requires_grad(loss.id())) {
      throw ContractError("backward on a loss that does not depend on any parameter");
    }
    if (backward_done_) throw ContractError("tape already consumed by a backward pass");
    backward_done_ = true;

    (*grad_buffer(loss.id()))[0] += T{1};
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      // Take the buffer so the rule may freely touch other nodes.
      std::vector<T> g = std::move(n.grad);
      n.backward(*this, std::span<const T>(g));
      n.grad = std::move(g);
    }
  }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* borrowed = nullptr;
    Tensor<T>* external = nullptr;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace kdfs

#endif  // KDFS_TAPE_HPP
