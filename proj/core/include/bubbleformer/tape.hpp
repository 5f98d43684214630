#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "bubbleformer/tensor.hpp"

namespace bubbleformer {

template <typename Real>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename Real>
class Var {
 public:
  Var() = default;
  Var(Tape<Real>* tape, int id) : tape_(tape), id_(id) {}

  Tape<Real>& tape() const { return *tape_; }
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr && id_ >= 0; }
  const Tensor<Real>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<Real>* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode recording of primitive operations.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward replay simply walks it in reverse. A
/// backward closure reads its own gradient and accumulates into its inputs;
/// fan-out therefore sums naturally.
template <typename Real>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  struct Node {
    Tensor<Real> value;
    Tensor<Real> grad;
    std::vector<int> inputs;
    Backward backward;
    bool requires_grad = false;
    const char* op = "leaf";
  };

  /// With `recording == false` no backward closures are kept (inference).
  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return recording_; }

  Var<Real> leaf(Tensor<Real> value, bool requires_grad = false) {
    check_finite(value, "leaf");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad && recording_;
    nodes_.push_back(std::move(n));
    return Var<Real>(this, static_cast<int>(nodes_.size()) - 1);
  }

  Var<Real> constant(Tensor<Real> value) { return leaf(std::move(value), false); }

  /// Record the result of a primitive. The output requires grad when any input does.
  Var<Real> push(const char* op, Tensor<Real> value, std::vector<int> inputs, Backward backward) {
    check_finite(value, op);
    Node n;
    n.value = std::move(value);
    n.op = op;
    bool needs = false;
    for (int i : inputs) needs = needs || nodes_[static_cast<std::size_t>(i)].requires_grad;
    if (recording_ && needs) {
      n.requires_grad = true;
      n.inputs = std::move(inputs);
      n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return Var<Real>(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Tensor<Real>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Tensor<Real>& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of node `id`, allocated as zeros on first touch.
  Tensor<Real>& grad_buffer(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad = Tensor<Real>::zeros(n.value.shape());
    return n.grad;
  }

  /// Replay in reverse from a scalar `loss`. Afterwards grad(id) holds
  /// d loss / d node for every node that requires grad and was reached.
  void backward(Var<Real> loss) {
    const Node& root = nodes_.at(static_cast<std::size_t>(loss.id()));
    if (root.value.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got " + shape_string(root.value.shape()));
    }
    if (!recording_) throw std::logic_error("backward on a non-recording tape");
    for (Node& n : nodes_) n.grad = Tensor<Real>();
    grad_buffer(loss.id())[0] = Real(1);
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, id);
    }
  }

 private:
  static void check_finite(const Tensor<Real>& t, const char* op) {
    if (!t.all_finite()) {
      throw NumericalError(std::string("non-finite value produced by ") + op);
    }
  }

  std::deque<Node> nodes_;  // stable references across push
  bool recording_;
};

template <typename Real>
const Tensor<Real>& Var<Real>::value() const {
  return tape_->value(id_);
}

}  // namespace bubbleformer
