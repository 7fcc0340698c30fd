#include "vx/linalg.hpp"

#include <cmath>
#include <vector>

#include "vx/ops.hpp"

namespace vx {

namespace {
Tensor identity_times(std::size_t m, double k) {
  Tensor eye(Shape{m, m}, 0.0);
  for (std::size_t i = 0; i < m; ++i) eye.data()[i * m + i] = k;
  return eye;
}
}  // namespace

Tensor newton_schulz_pinv(const Tensor& a, std::size_t iters) {
  if (a.rank() < 2 || a.shape()[a.rank() - 1] != a.shape()[a.rank() - 2]) {
    throw ShapeError("newton_schulz_pinv: expected square matrices, got " +
                     shape_str(a.shape()));
  }
  const std::size_t m = a.shape()[a.rank() - 1];
  const std::size_t rank = a.rank();

  // per-slice |A|_1 * |A|_inf as [..,1,1] for broadcast; stays on the tape so
  // gradients flow through the init as well
  Tensor mags = vx::abs(a);
  Tensor norm_1 = max_axis(sum_axis(mags, rank - 2, true), rank - 1, true);
  Tensor norm_inf = max_axis(sum_axis(mags, rank - 1, true), rank - 2, true);
  mags = Tensor();
  Tensor denom = mul(norm_1, norm_inf);
  for (std::size_t i = 0; i < denom.size(); ++i) {
    if (denom.data()[i] == 0) throw NumericError("newton_schulz_pinv: zero matrix");
  }

  const Tensor i7 = identity_times(m, 7.0);
  const Tensor i15 = identity_times(m, 15.0);
  const Tensor i13 = identity_times(m, 13.0);

  Tensor z = div(transpose(a), denom);
  for (std::size_t it = 0; it < iters; ++it) {
    Tensor az = matmul(a, z);
    Tensor t = sub(i7, az);
    t = sub(i15, matmul(az, t));
    t = sub(i13, matmul(az, t));
    z = scale(matmul(z, t), 0.25);
  }
  return z;
}

namespace {
// One-sided Jacobi on one r x c column-major-free matrix stored row-major.
// Orthogonalizes columns in place, accumulates V, then assembles
// pinv = V diag(1/sigma) U^T with small singular values zeroed.
void jacobi_pinv_slice(const double* in, double* out, std::size_t r, std::size_t c) {
  std::vector<double> a(in, in + r * c);
  std::vector<double> v(c * c, 0.0);
  for (std::size_t i = 0; i < c; ++i) v[i * c + i] = 1.0;

  const int max_sweeps = 60;
  const double tol = 1e-14;
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < c; ++p) {
      for (std::size_t q = p + 1; q < c; ++q) {
        double app = 0, aqq = 0, apq = 0;
        for (std::size_t i = 0; i < r; ++i) {
          const double x = a[i * c + p], y = a[i * c + q];
          app += x * x;
          aqq += y * y;
          apq += x * y;
        }
        if (std::abs(apq) <= tol * std::sqrt(app * aqq) || apq == 0.0) continue;
        rotated = true;
        const double zeta = (aqq - app) / (2.0 * apq);
        const double t = (zeta >= 0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double cs = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = cs * t;
        for (std::size_t i = 0; i < r; ++i) {
          const double x = a[i * c + p], y = a[i * c + q];
          a[i * c + p] = cs * x - sn * y;
          a[i * c + q] = sn * x + cs * y;
        }
        for (std::size_t i = 0; i < c; ++i) {
          const double x = v[i * c + p], y = v[i * c + q];
          v[i * c + p] = cs * x - sn * y;
          v[i * c + q] = sn * x + cs * y;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sigma(c, 0.0);
  double smax = 0;
  for (std::size_t j = 0; j < c; ++j) {
    double s = 0;
    for (std::size_t i = 0; i < r; ++i) s += a[i * c + j] * a[i * c + j];
    sigma[j] = std::sqrt(s);
    smax = std::max(smax, sigma[j]);
  }
  const double cutoff = smax * std::max(r, c) * 1e-15;

  // out[c,r] = sum_j sigma_j > cutoff : v[:,j] (1/sigma_j) u[:,j]^T with
  // u[:,j] = a[:,j]/sigma_j
  std::fill(out, out + r * c, 0.0);
  for (std::size_t j = 0; j < c; ++j) {
    if (sigma[j] <= cutoff) continue;
    const double inv2 = 1.0 / (sigma[j] * sigma[j]);
    for (std::size_t i = 0; i < c; ++i) {
      const double vij = v[i * c + j] * inv2;
      if (vij == 0.0) continue;
      for (std::size_t k = 0; k < r; ++k) {
        out[i * r + k] += vij * a[k * c + j];
      }
    }
  }
}
}  // namespace

Tensor svd_pinv(const Tensor& a) {
  if (a.rank() < 2) {
    throw ShapeError("svd_pinv: expected matrices, got " + shape_str(a.shape()));
  }
  const std::size_t r = a.shape()[a.rank() - 2];
  const std::size_t c = a.shape()[a.rank() - 1];
  Shape os(a.shape());
  os[a.rank() - 2] = c;
  os[a.rank() - 1] = r;
  Tensor out(os);
  const std::size_t slices = a.size() / (r * c);
  for (std::size_t s = 0; s < slices; ++s) {
    jacobi_pinv_slice(a.data() + s * r * c, out.data() + s * r * c, r, c);
  }
  return out;
}

}  // namespace vx
