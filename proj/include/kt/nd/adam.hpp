#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "kt/nd/tape.hpp"

namespace kt::nd {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Global L2 clipping over all parameters of one step; off when empty.
  std::optional<double> max_grad_norm;
};

/// Moment buffers index-aligned with the parameter list handed to adam_step.
struct AdamState {
  AdamOptions options;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::int64_t t = 0;
};

/// One bias-corrected Adam update using each parameter's `grad` buffer.
/// Parameters without a gradient are treated as having a zero gradient.
/// Throws NumericalError naming the parameter if any gradient is non-finite;
/// in that case nothing is modified.
void adam_step(std::span<Tensor* const> params, AdamState& state);

/// Thin owner of a parameter list plus its Adam state.
class Adam {
 public:
  Adam(std::vector<Tensor*> params, AdamOptions options = {});

  void zero_grad();
  void step() { adam_step(params_, state_); }

  const AdamState& state() const { return state_; }
  AdamState& state() { return state_; }
  std::span<Tensor* const> params() const { return params_; }

 private:
  std::vector<Tensor*> params_;
  AdamState state_;
};

}  // namespace kt::nd
