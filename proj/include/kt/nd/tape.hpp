#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "kt/nd/scalar.hpp"

namespace kt::nd {

/// Owned dense array with an optional gradient buffer. Model parameters live
/// here; tapes only borrow them for the duration of one forward/backward pass.
struct Tensor {
  std::string name;
  Matrix value;
  Matrix grad;  // empty until the first accumulation
  bool requires_grad = true;

  Tensor() = default;
  Tensor(std::string n, Matrix v, bool trainable = true)
      : name(std::move(n)), value(std::move(v)), requires_grad(trainable) {}

  std::vector<Index> shape() const { return {value.rows(), value.cols()}; }
  Index size() const { return value.size(); }
  bool has_grad() const { return grad.size() == value.size() && grad.size() > 0; }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  /// Adjoint accumulated by the most recent backward pass (zero-sized if unreached).
  const Matrix& adjoint() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double item() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Linear record of primitive operations. Nodes are appended in evaluation
/// order, so the vector index is a topological order and the backward sweep
/// walks it in reverse, visiting each node once.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    Matrix value;
    Matrix adjoint;
    bool requires_grad = false;
    Tensor* leaf = nullptr;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Borrow a parameter. Gradients flow back into `tensor.grad` on backward().
  Var leaf(Tensor& tensor);
  Var constant(Matrix value);
  Var constant(double value);

  /// Append an operation node. `backward` is skipped when no input needs grad.
  Var record(Matrix value, bool requires_grad, BackwardFn backward);

  /// Reverse sweep from a 1x1 node. Leaf gradients accumulate additively.
  void backward(const Var& loss);

  std::size_t size() const { return nodes_.size(); }
  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }

  /// Adds `delta` into the adjoint of node `id`, allocating it on first use.
  void accumulate(std::size_t id, const Matrix& delta);
  template <typename Expr>
  void accumulate_expr(std::size_t id, const Expr& delta) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.adjoint.size() == 0) {
      n.adjoint = delta;
    } else {
      n.adjoint += delta;
    }
  }

 private:
  std::vector<Node> nodes_;
};

/// Accumulates gradients of `loss` into every leaf tensor reachable from it.
void backward(const Var& loss);

}  // namespace kt::nd
