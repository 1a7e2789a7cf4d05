#pragma once

#include <span>
#include <vector>

#include "kt/nd/tape.hpp"

namespace kt::nd {

// Differentiable primitives. Every function records one node on the tape of
// its first argument and throws ContractViolation on nonconforming shapes.
//
// Binary elementwise ops broadcast the second operand when its extent is 1
// along a dimension (row vector bias, column mask, or 1x1 scalar).

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);

/// alpha * a + beta
Var affine(const Var& a, double alpha, double beta);
inline Var neg(const Var& a) { return affine(a, -1.0, 0.0); }
/// 1 - a
inline Var one_minus(const Var& a) { return affine(a, -1.0, 1.0); }

Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(const Var& a, Index begin, Index count);
Var slice_rows(const Var& a, Index begin, Index count);
/// Row gather with repetition allowed; the embedding lookup primitive.
Var gather_rows(const Var& table, std::span<const Index> rows);
/// Mean of the table rows listed in each bag. Bags must be non-empty.
Var bag_mean_rows(const Var& table, std::span<const std::vector<Index>> bags);

Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var log_sigmoid(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);

/// Copy of the value with no gradient path.
Var detach(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

}  // namespace kt::nd
