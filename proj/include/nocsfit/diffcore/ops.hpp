#pragma once

#include <cstddef>

#include "nocsfit/diffcore/tape.hpp"

// Differentiable primitives. Every op records onto the tape of its operands and
// throws ShapeMismatch for non-conformable shapes.
namespace nf::ops {

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var relu(const Var& a);
Var transpose(const Var& a);

// [a; b] stacked along rows; column counts must match.
Var concat_rows(const Var& a, const Var& b);
// Column vector of per-row means / maxima across columns.
Var mean_pool_cols(const Var& a);
Var max_pool_cols(const Var& a);
// Repeats a column vector n times.
Var tile_cols(const Var& column, std::size_t n);
// a + bias broadcast across columns; bias is rows x 1.
Var add_bias(const Var& a, const Var& bias);
// Adds s * I to a square matrix (s is a 1x1 node).
Var add_scaled_identity(const Var& a, const Var& s);

// Row-wise softmax with per-row max subtraction.
Var softmax_rows(const Var& a);

Var sum(const Var& a);

}  // namespace nf::ops
