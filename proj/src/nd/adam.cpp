#include "kt/nd/adam.hpp"

#include <cmath>

#include "kt/error.hpp"

namespace kt::nd {

void adam_step(std::span<Tensor* const> params, AdamState& state) {
  if (state.first_moment.empty()) {
    for (Tensor* p : params) {
      state.first_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      state.second_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw ContractViolation("adam_step: parameter list changed size between steps");
  }

  double sq_norm = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = *params[i];
    if (state.first_moment[i].rows() != p.value.rows() || state.first_moment[i].cols() != p.value.cols()) {
      throw ContractViolation("adam_step: moment shape does not match parameter '" + p.name + "'");
    }
    if (!p.has_grad()) continue;
    if (!p.grad.allFinite()) {
      throw NumericalError("adam_step: non-finite gradient in parameter '" + p.name + "'");
    }
    sq_norm += p.grad.squaredNorm();
  }

  double clip = 1.0;
  if (state.options.max_grad_norm && std::sqrt(sq_norm) > *state.options.max_grad_norm) {
    clip = *state.options.max_grad_norm / std::sqrt(sq_norm);
  }

  const AdamOptions& o = state.options;
  state.t += 1;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    if (p.has_grad()) {
      const Matrix g = clip * p.grad;
      m = o.beta1 * m + (1.0 - o.beta1) * g;
      v = o.beta2 * v + (1.0 - o.beta2) * g.cwiseAbs2();
    } else {
      m *= o.beta1;
      v *= o.beta2;
    }
    p.value.array() -= o.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + o.epsilon);
  }
}

Adam::Adam(std::vector<Tensor*> params, AdamOptions options) : params_(std::move(params)) {
  state_.options = options;
}

void Adam::zero_grad() {
  for (Tensor* p : params_) p->zero_grad();
}

}  // namespace kt::nd
