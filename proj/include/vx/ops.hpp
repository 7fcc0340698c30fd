#pragma once

#include <vector>

#include "vx/rng.hpp"
#include "vx/tensor.hpp"

namespace vx {

// ---- construction ----
Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
Tensor trunc_normal(Shape shape, Rng& rng, double stddev);
Tensor uniform(Shape shape, Rng& rng, double lo, double hi);
Tensor arange(std::size_t n);  // [n] with values 0..n-1

// ---- elementwise (numpy-style right-aligned broadcasting) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);
Tensor abs(const Tensor& x);  // subgradient 0 at 0
Tensor relu(const Tensor& x);
// tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
Tensor gelu(const Tensor& x);

// ---- shape ----
Tensor reshape(const Tensor& x, Shape shape);  // zero-copy view
Tensor transpose(const Tensor& x);             // swap last two axes
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t stop);
Tensor expand(const Tensor& x, const Shape& target);  // broadcast copy

// ---- reductions ----
Tensor sum(const Tensor& x);   // scalar
Tensor mean(const Tensor& x);  // scalar
Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim = false);
// Max over one axis; gradient flows to the first maximal element per slice.
Tensor max_axis(const Tensor& x, std::size_t axis, bool keepdim = false);

// ---- core math ----
// Batched matrix product: a[..,m,p] x b[..,p,n] -> [..,m,n] with
// broadcasting over the leading batch extents.
Tensor matmul(const Tensor& a, const Tensor& b);

// axis may be negative (python-style). Subtracts the per-slice max before
// exponentiation, so arbitrarily large inputs stay finite.
Tensor softmax(const Tensor& x, int axis = -1);

// Normalizes the last axis; gamma/beta are [d]. Zero-variance rows come out
// as beta thanks to the eps guard.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// x[B,Cin,H,W] * w[Cout,Cin,kh,kw] + b[Cout]; odd kernels, stride 1 or 2,
// floor output geometry Ho = (H + 2*pad - kh)/stride + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              std::size_t stride, std::size_t padding);

// Real part of the unnormalized 2D DFT of x[B,n,d]: transform over the
// hidden axis, then over the sequence axis. Linear and self-adjoint.
Tensor dft2_real(const Tensor& x);

// Rotary position map on x[B,H,n,dh] (dh even): consecutive coordinate
// pairs (2j, 2j+1) at sequence position m rotate by m * base^(-2j/dh).
Tensor rope(const Tensor& x, double base);

// Means over m contiguous segments of the token axis of x[B,H,n,dh].
// Segments have length n/m; the last absorbs the remainder.
Tensor segment_mean(const Tensor& x, std::size_t m);

// Inverted dropout; p == 0 returns x untouched and draws nothing from rng.
Tensor dropout(const Tensor& x, double p, Rng& rng);

// Mean cross-entropy of logits[B,C] against integer labels (log-softmax
// fused for stability). Uniform logits give exactly ln(C).
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// x·w (+ b broadcast over rows when defined).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor());

// ---- raw helpers (never recorded on a tape) ----
// dst += scale * src (same shape).
void add_inplace(Tensor& dst, const Tensor& src, double scl = 1.0);
// Batched gemm with the last two axes of a/b optionally transposed.
Tensor matmul_raw(const Tensor& a, const Tensor& b, bool ta, bool tb);

}  // namespace vx
