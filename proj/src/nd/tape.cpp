#include "kt/nd/tape.hpp"

#include <sstream>

#include "kt/error.hpp"

namespace kt::nd {

const Matrix& Var::value() const { return tape_->node(id_).value; }
const Matrix& Var::adjoint() const { return tape_->node(id_).adjoint; }
bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

double Var::item() const {
  const Matrix& v = value();
  if (v.size() != 1) {
    std::ostringstream msg;
    msg << "item: expected a 1x1 value, got " << v.rows() << "x" << v.cols();
    throw ContractViolation(msg.str());
  }
  return v(0, 0);
}

Var Tape::leaf(Tensor& tensor) {
  Node n;
  n.value = tensor.value;
  n.requires_grad = tensor.requires_grad;
  n.leaf = tensor.requires_grad ? &tensor : nullptr;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(double value) { return constant(Matrix::Constant(1, 1, value)); }

Var Tape::record(Matrix value, bool requires_grad, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(std::size_t id, const Matrix& delta) { accumulate_expr(id, delta); }

void Tape::backward(const Var& loss) {
  if (loss.tape() != this) {
    throw ContractViolation("backward: loss was recorded on a different tape");
  }
  const Matrix& v = loss.value();
  if (v.rows() != 1 || v.cols() != 1) {
    std::ostringstream msg;
    msg << "backward: loss must be scalar (1x1), got " << v.rows() << "x" << v.cols();
    throw ContractViolation(msg.str());
  }
  for (Node& n : nodes_) n.adjoint.resize(0, 0);
  if (!nodes_[loss.id()].requires_grad) return;
  nodes_[loss.id()].adjoint = Matrix::Ones(1, 1);

  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.adjoint.size() == 0) continue;
    if (n.leaf != nullptr) {
      Tensor& t = *n.leaf;
      if (!t.has_grad()) t.zero_grad();
      t.grad += n.adjoint;
    } else if (n.backward) {
      n.backward(*this, i);
    }
  }
}

void backward(const Var& loss) { loss.tape()->backward(loss); }

}  // namespace kt::nd
