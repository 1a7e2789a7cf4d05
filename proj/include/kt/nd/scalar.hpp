#pragma once

#include <cmath>

#include <Eigen/Dense>

namespace kt::nd {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Matrix = MatrixX<double>;
using Index = Eigen::Index;

// Stable scalar primitives. Every branch avoids exp() of a positive argument.

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  if (x >= Scalar(0)) {
    return Scalar(1) / (Scalar(1) + exp(-x));
  }
  const Scalar e = exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Scalar softplus(Scalar x) {
  using std::exp;
  using std::log1p;
  if (x > Scalar(0)) {
    return x + log1p(exp(-x));
  }
  return log1p(exp(x));
}

/// log(sigmoid(x)); finite and <= 0 for every finite x.
template <typename Scalar>
Scalar log_sigmoid(Scalar x) {
  using std::exp;
  using std::log1p;
  if (x <= Scalar(0)) {
    return x - log1p(exp(x));
  }
  return -log1p(exp(-x));
}

/// Bernoulli cross entropy written on the logit, -r log s(z) - (1-r) log s(-z).
template <typename Scalar>
Scalar bce_with_logit(Scalar logit, Scalar label) {
  return -(label * log_sigmoid(logit) + (Scalar(1) - label) * log_sigmoid(-logit));
}

}  // namespace kt::nd
