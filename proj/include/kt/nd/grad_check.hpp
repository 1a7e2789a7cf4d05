#pragma once

#include <functional>
#include <span>

#include "kt/nd/tape.hpp"

namespace kt::nd {

struct GradCheckResult {
  double max_relative_error = 0.0;
  /// Flattened coordinate (over the parameter list, row-major) with the worst error.
  Index worst_coordinate = -1;
};

/// Builds a scalar loss on the given tape from the current parameter values.
using LossBuilder = std::function<Var(Tape&)>;

/// Compares backward() against central differences over every coordinate of
/// `params`. Error per coordinate is |analytic - numeric| / max(1, |analytic|).
/// Throws NumericalError naming the coordinate when the loss is non-finite.
GradCheckResult grad_check(std::span<Tensor* const> params, const LossBuilder& loss, double step = 1e-4);

/// Single-input convenience: f maps a leaf Var to a scalar Var.
GradCheckResult grad_check(const std::function<Var(Tape&, const Var&)>& f, const Matrix& point,
                           double step = 1e-4);

}  // namespace kt::nd
