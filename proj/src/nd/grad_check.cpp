#include "kt/nd/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "kt/error.hpp"

namespace kt::nd {
namespace {

double evaluate(const LossBuilder& loss, Index coordinate) {
  Tape tape;
  const double v = loss(tape).item();
  if (!std::isfinite(v)) {
    throw NumericalError("grad_check: non-finite loss while perturbing coordinate " + std::to_string(coordinate));
  }
  return v;
}

}  // namespace

GradCheckResult grad_check(std::span<Tensor* const> params, const LossBuilder& loss, double step) {
  if (!(step > 0.0)) throw ContractViolation("grad_check: step must be positive");

  for (Tensor* p : params) p->zero_grad();
  {
    Tape tape;
    Var out = loss(tape);
    if (!std::isfinite(out.item())) throw NumericalError("grad_check: non-finite loss at the base point");
    tape.backward(out);
  }

  GradCheckResult result;
  Index flat = 0;
  for (Tensor* p : params) {
    const Matrix analytic = p->grad;
    for (Index k = 0; k < p->value.size(); ++k, ++flat) {
      double& x = p->value.data()[k];
      const double saved = x;
      x = saved + step;
      const double up = evaluate(loss, flat);
      x = saved - step;
      const double down = evaluate(loss, flat);
      x = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic.data()[k];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (result.worst_coordinate < 0 || err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_coordinate = flat;
      }
    }
  }
  return result;
}

GradCheckResult grad_check(const std::function<Var(Tape&, const Var&)>& f, const Matrix& point, double step) {
  Tensor x("x", point);
  Tensor* params[] = {&x};
  return grad_check(params, [&](Tape& t) { return f(t, t.leaf(x)); }, step);
}

}  // namespace kt::nd
