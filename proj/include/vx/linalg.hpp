#pragma once

#include "vx/tensor.hpp"

namespace vx {

// Iterative Moore-Penrose pseudo-inverse of the square matrices in
// a[..,m,m] via the cubic Newton-Schulz recurrence
//   Z <- 1/4 * Z (13 I - A Z (15 I - A Z (7 I - A Z)))
// initialized with Z0 = A^T / (|A|_1 * |A|_inf). Differentiable through the
// iterations and the init scale.
Tensor newton_schulz_pinv(const Tensor& a, std::size_t iters);

// Exact pseudo-inverse of a[..,r,c] via one-sided Jacobi SVD. Not recorded
// on the tape; intended for oracle/verification paths.
Tensor svd_pinv(const Tensor& a);

}  // namespace vx
