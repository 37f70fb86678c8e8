#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iac/tensor.hpp"

namespace iac::diff {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Receives the node's own id; reads its grad and pushes into the inputs.
using BackwardFn = std::function<void(Tape&, std::size_t)>;

/// Linear record of primitive evaluations. Nodes are appended in evaluation order,
/// so a reverse sweep is a valid topological order.
class Tape {
 public:
  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, true, {}});
    return Var(this, nodes_.size() - 1);
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op output. The backward closure is dropped when no input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    bool needs = false;
    for (const Var& v : inputs) needs = needs || node(v.id()).requires_grad;
    nodes_.push_back(Node{std::move(value), {}, needs, false, needs ? std::move(backward) : BackwardFn{}});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool is_leaf(std::size_t id) const { return nodes_.at(id).is_leaf; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of the last backward() target with respect to the node; zeros if untouched.
  const Tensor& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }
  const Tensor& grad(const Var& v) { return grad(v.id()); }

  /// Mutable gradient buffer, allocated on first touch.
  Tensor& grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  /// Adds `g` into the input's gradient if it participates.
  template <typename F>
  void accumulate(const Var& input, F&& fill) {
    if (!nodes_[input.id()].requires_grad) return;
    fill(grad_buffer(input.id()));
  }

  void backward(const Var& loss) {
    if (loss.value().size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    for (Node& n : nodes_) n.grad = Tensor();
    grad_buffer(loss.id())[0] = 1.0;
    visited_ = 0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.is_leaf || n.grad.size() == 0) continue;
      ++visited_;
      n.backward(*this, i);
    }
  }

  /// Interior nodes whose closure ran in the last backward().
  std::size_t last_visited() const { return visited_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool is_leaf = false;
    BackwardFn backward;
  };

  Node& node(std::size_t id) { return nodes_.at(id); }

  std::vector<Node> nodes_;
  std::size_t visited_ = 0;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

}  // namespace iac::diff
