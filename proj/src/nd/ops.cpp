#include "kt/nd/ops.hpp"

#include <cmath>
#include <sstream>
#include <string_view>

#include "kt/error.hpp"

namespace kt::nd {
namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream s;
  s << "[" << m.rows() << "x" << m.cols() << "]";
  return s.str();
}

[[noreturn]] void shape_error(std::string_view op, const Matrix& a, const Matrix& b) {
  std::ostringstream msg;
  msg << op << ": shape mismatch " << shape_str(a) << " vs " << shape_str(b);
  throw ContractViolation(msg.str());
}

void check_same_tape(std::string_view op, const Var& a, const Var& b) {
  if (a.tape() != b.tape()) {
    throw ContractViolation(std::string(op) + ": operands recorded on different tapes");
  }
}

bool broadcastable(Index n, Index out) { return n == out || n == 1; }

Matrix expand(const Matrix& m, Index rows, Index cols) {
  if (m.rows() == rows && m.cols() == cols) return m;
  return m.replicate(rows / m.rows(), cols / m.cols());
}

Matrix reduce_to(const Matrix& g, Index rows, Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  Matrix r = g;
  if (rows == 1 && g.rows() != 1) r = Matrix(r.colwise().sum());
  if (cols == 1 && g.cols() != 1) r = Matrix(r.rowwise().sum());
  return r;
}

struct BroadcastShape {
  Index rows;
  Index cols;
};

BroadcastShape broadcast_shape(std::string_view op, const Matrix& a, const Matrix& b) {
  const Index rows = std::max(a.rows(), b.rows());
  const Index cols = std::max(a.cols(), b.cols());
  if (!broadcastable(a.rows(), rows) || !broadcastable(b.rows(), rows) ||
      !broadcastable(a.cols(), cols) || !broadcastable(b.cols(), cols)) {
    shape_error(op, a, b);
  }
  return {rows, cols};
}

template <typename Fn>
Var unary(const Var& a, Matrix out, Fn&& local_grad) {
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), a.requires_grad(),
                          [ia, local_grad = std::forward<Fn>(local_grad)](Tape& t, std::size_t self) {
                            const Matrix& g = t.node(self).adjoint;
                            t.accumulate(ia, local_grad(t.node(ia).value, t.node(self).value, g));
                          });
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  check_same_tape("matmul", a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) shape_error("matmul", av, bv);
  Matrix out = av * bv;
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return a.tape()->record(std::move(out), a.requires_grad() || b.requires_grad(),
                          [ia, ib](Tape& t, std::size_t self) {
                            const Matrix& g = t.node(self).adjoint;
                            if (t.node(ia).requires_grad) {
                              t.accumulate(ia, g * t.node(ib).value.transpose());
                            }
                            if (t.node(ib).requires_grad) {
                              t.accumulate(ib, t.node(ia).value.transpose() * g);
                            }
                          });
}

Var add(const Var& a, const Var& b) {
  check_same_tape("add", a, b);
  const auto [rows, cols] = broadcast_shape("add", a.value(), b.value());
  Matrix out = expand(a.value(), rows, cols) + expand(b.value(), rows, cols);
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return a.tape()->record(std::move(out), a.requires_grad() || b.requires_grad(),
                          [ia, ib](Tape& t, std::size_t self) {
                            const Matrix& g = t.node(self).adjoint;
                            const Matrix& av = t.node(ia).value;
                            const Matrix& bv = t.node(ib).value;
                            if (t.node(ia).requires_grad) t.accumulate(ia, reduce_to(g, av.rows(), av.cols()));
                            if (t.node(ib).requires_grad) t.accumulate(ib, reduce_to(g, bv.rows(), bv.cols()));
                          });
}

Var sub(const Var& a, const Var& b) {
  check_same_tape("sub", a, b);
  const auto [rows, cols] = broadcast_shape("sub", a.value(), b.value());
  Matrix out = expand(a.value(), rows, cols) - expand(b.value(), rows, cols);
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return a.tape()->record(std::move(out), a.requires_grad() || b.requires_grad(),
                          [ia, ib](Tape& t, std::size_t self) {
                            const Matrix& g = t.node(self).adjoint;
                            const Matrix& av = t.node(ia).value;
                            const Matrix& bv = t.node(ib).value;
                            if (t.node(ia).requires_grad) t.accumulate(ia, reduce_to(g, av.rows(), av.cols()));
                            if (t.node(ib).requires_grad) t.accumulate(ib, -reduce_to(g, bv.rows(), bv.cols()));
                          });
}

Var mul(const Var& a, const Var& b) {
  check_same_tape("mul", a, b);
  const auto [rows, cols] = broadcast_shape("mul", a.value(), b.value());
  Matrix out = expand(a.value(), rows, cols).cwiseProduct(expand(b.value(), rows, cols));
  const std::size_t ia = a.id();
  const std::size_t ib = b.id();
  return a.tape()->record(
      std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib](Tape& t, std::size_t self) {
        const Matrix& g = t.node(self).adjoint;
        const Matrix& av = t.node(ia).value;
        const Matrix& bv = t.node(ib).value;
        const Index r = g.rows();
        const Index c = g.cols();
        if (t.node(ia).requires_grad) {
          t.accumulate(ia, reduce_to(g.cwiseProduct(expand(bv, r, c)), av.rows(), av.cols()));
        }
        if (t.node(ib).requires_grad) {
          t.accumulate(ib, reduce_to(g.cwiseProduct(expand(av, r, c)), bv.rows(), bv.cols()));
        }
      });
}

Var affine(const Var& a, double alpha, double beta) {
  Matrix out = (alpha * a.value().array() + beta).matrix();
  return unary(a, std::move(out), [alpha](const Matrix&, const Matrix&, const Matrix& g) -> Matrix {
    return alpha * g;
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractViolation("concat_cols: no operands");
  const Index rows = parts[0].rows();
  Index cols = 0;
  bool needs = false;
  for (const Var& p : parts) {
    check_same_tape("concat_cols", parts[0], p);
    if (p.rows() != rows) shape_error("concat_cols", parts[0].value(), p.value());
    cols += p.cols();
    needs = needs || p.requires_grad();
  }
  Matrix out(rows, cols);
  std::vector<std::size_t> ids;
  std::vector<Index> offsets;
  Index at = 0;
  for (const Var& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(at);
    at += p.cols();
  }
  return parts[0].tape()->record(std::move(out), needs, [ids, offsets](Tape& t, std::size_t self) {
    const Matrix& g = t.node(self).adjoint;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.node(ids[k]).requires_grad) continue;
      t.accumulate(ids[k], g.middleCols(offsets[k], t.node(ids[k]).value.cols()));
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ContractViolation("concat_rows: no operands");
  const Index cols = parts[0].cols();
  Index rows = 0;
  bool needs = false;
  for (const Var& p : parts) {
    check_same_tape("concat_rows", parts[0], p);
    if (p.cols() != cols) shape_error("concat_rows", parts[0].value(), p.value());
    rows += p.rows();
    needs = needs || p.requires_grad();
  }
  Matrix out(rows, cols);
  std::vector<std::size_t> ids;
  std::vector<Index> offsets;
  Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    ids.push_back(p.id());
    offsets.push_back(at);
    at += p.rows();
  }
  return parts[0].tape()->record(std::move(out), needs, [ids, offsets](Tape& t, std::size_t self) {
    const Matrix& g = t.node(self).adjoint;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.node(ids[k]).requires_grad) continue;
      t.accumulate(ids[k], g.middleRows(offsets[k], t.node(ids[k]).value.rows()));
    }
  });
}

Var slice_cols(const Var& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) {
    std::ostringstream msg;
    msg << "slice_cols: range [" << begin << ", " << begin + count << ") outside " << shape_str(a.value());
    throw ContractViolation(msg.str());
  }
  Matrix out = a.value().middleCols(begin, count);
  return unary(a, std::move(out), [begin, count](const Matrix& av, const Matrix&, const Matrix& g) -> Matrix {
    Matrix d = Matrix::Zero(av.rows(), av.cols());
    d.middleCols(begin, count) = g;
    return d;
  });
}

Var slice_rows(const Var& a, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > a.rows()) {
    std::ostringstream msg;
    msg << "slice_rows: range [" << begin << ", " << begin + count << ") outside " << shape_str(a.value());
    throw ContractViolation(msg.str());
  }
  Matrix out = a.value().middleRows(begin, count);
  const std::size_t ia = a.id();
  return a.tape()->record(std::move(out), a.requires_grad(), [ia, begin, count](Tape& t, std::size_t self) {
    Tape::Node& src = t.node(ia);
    if (src.adjoint.size() == 0) src.adjoint = Matrix::Zero(src.value.rows(), src.value.cols());
    src.adjoint.middleRows(begin, count) += t.node(self).adjoint;
  });
}

Var gather_rows(const Var& table, std::span<const Index> rows) {
  const Matrix& tv = table.value();
  Matrix out(static_cast<Index>(rows.size()), tv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= tv.rows()) {
      std::ostringstream msg;
      msg << "gather_rows: row " << rows[i] << " outside " << shape_str(tv);
      throw ContractViolation(msg.str());
    }
    out.row(static_cast<Index>(i)) = tv.row(rows[i]);
  }
  const std::size_t ia = table.id();
  std::vector<Index> idx(rows.begin(), rows.end());
  return table.tape()->record(std::move(out), table.requires_grad(), [ia, idx](Tape& t, std::size_t self) {
    Tape::Node& src = t.node(ia);
    if (src.adjoint.size() == 0) src.adjoint = Matrix::Zero(src.value.rows(), src.value.cols());
    const Matrix& g = t.node(self).adjoint;
    for (std::size_t i = 0; i < idx.size(); ++i) src.adjoint.row(idx[i]) += g.row(static_cast<Index>(i));
  });
}

Var bag_mean_rows(const Var& table, std::span<const std::vector<Index>> bags) {
  const Matrix& tv = table.value();
  Matrix out = Matrix::Zero(static_cast<Index>(bags.size()), tv.cols());
  for (std::size_t i = 0; i < bags.size(); ++i) {
    if (bags[i].empty()) throw ContractViolation("bag_mean_rows: empty bag at row " + std::to_string(i));
    for (Index r : bags[i]) {
      if (r < 0 || r >= tv.rows()) {
        std::ostringstream msg;
        msg << "bag_mean_rows: row " << r << " outside " << shape_str(tv);
        throw ContractViolation(msg.str());
      }
      out.row(static_cast<Index>(i)) += tv.row(r);
    }
    out.row(static_cast<Index>(i)) /= static_cast<double>(bags[i].size());
  }
  const std::size_t ia = table.id();
  std::vector<std::vector<Index>> copy(bags.begin(), bags.end());
  return table.tape()->record(std::move(out), table.requires_grad(),
                              [ia, copy = std::move(copy)](Tape& t, std::size_t self) {
                                Tape::Node& src = t.node(ia);
                                if (src.adjoint.size() == 0) {
                                  src.adjoint = Matrix::Zero(src.value.rows(), src.value.cols());
                                }
                                const Matrix& g = t.node(self).adjoint;
                                for (std::size_t i = 0; i < copy.size(); ++i) {
                                  const double w = 1.0 / static_cast<double>(copy[i].size());
                                  for (Index r : copy[i]) src.adjoint.row(r) += w * g.row(static_cast<Index>(i));
                                }
                              });
}

Var tanh(const Var& a) {
  Matrix out = a.value().array().tanh().matrix();
  return unary(a, std::move(out), [](const Matrix&, const Matrix& y, const Matrix& g) -> Matrix {
    return (g.array() * (1.0 - y.array().square())).matrix();
  });
}

Var sigmoid(const Var& a) {
  Matrix out = a.value().unaryExpr([](double x) { return nd::sigmoid(x); });
  return unary(a, std::move(out), [](const Matrix&, const Matrix& y, const Matrix& g) -> Matrix {
    return (g.array() * y.array() * (1.0 - y.array())).matrix();
  });
}

Var log_sigmoid(const Var& a) {
  Matrix out = a.value().unaryExpr([](double x) { return nd::log_sigmoid(x); });
  // d/dx log s(x) = s(-x)
  return unary(a, std::move(out), [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
    return g.cwiseProduct(x.unaryExpr([](double v) { return nd::sigmoid(-v); }));
  });
}

Var sum(const Var& a) {
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  return unary(a, std::move(out), [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
    return Matrix::Constant(x.rows(), x.cols(), g(0, 0));
  });
}

Var mean(const Var& a) {
  if (a.value().size() == 0) throw ContractViolation("mean: empty operand");
  const double n = static_cast<double>(a.value().size());
  Matrix out = Matrix::Constant(1, 1, a.value().sum() / n);
  return unary(a, std::move(out), [n](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
    return Matrix::Constant(x.rows(), x.cols(), g(0, 0) / n);
  });
}

Var detach(const Var& a) { return a.tape()->constant(a.value()); }

}  // namespace kt::nd
