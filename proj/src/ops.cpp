#include "vx/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

#include "vx/parallel.hpp"

namespace vx {

namespace {

constexpr std::size_t kGemmParallelMacs = 1u << 21;

// ---------------- broadcasting machinery ----------------

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                       shape_str(b) + " are not broadcastable");
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Row-major strides of `shape` right-aligned into `rank` axes, with stride 0
// on broadcast (extent-1 or missing) axes.
std::vector<std::size_t> bcast_strides(const Shape& shape, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> st(rank, 0);
  std::size_t acc = 1;
  for (std::size_t i = shape.size(); i-- > 0;) {
    const std::size_t oi = i + (rank - shape.size());
    st[oi] = shape[i] == 1 ? 0 : acc;
    acc *= shape[i];
  }
  return st;
}

template <class F>
void bcast_apply(const Tensor& a, const Tensor& b, Tensor& out, F f) {
  const std::size_t n = out.size();
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  if (same_shape(a.shape(), b.shape())) {
    for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
    return;
  }
  if (b.size() == 1 && same_shape(a.shape(), out.shape())) {
    const double v = pb[0];
    for (std::size_t i = 0; i < n; ++i) po[i] = f(pa[i], v);
    return;
  }
  if (a.size() == 1 && same_shape(b.shape(), out.shape())) {
    const double v = pa[0];
    for (std::size_t i = 0; i < n; ++i) po[i] = f(v, pb[i]);
    return;
  }
  const Shape& os = out.shape();
  const std::size_t rank = os.size();
  const auto sa = bcast_strides(a.shape(), os);
  const auto sb = bcast_strides(b.shape(), os);
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t inner = os[rank - 1];
  const std::size_t ia_step = sa[rank - 1];
  const std::size_t ib_step = sb[rank - 1];
  std::size_t oa = 0, ob = 0, o = 0;
  while (o < n) {
    std::size_t x = oa, y = ob;
    for (std::size_t j = 0; j < inner; ++j, x += ia_step, y += ib_step) {
      po[o + j] = f(pa[x], pb[y]);
    }
    o += inner;
    // odometer over all but the innermost axis
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      oa += sa[ax];
      ob += sb[ax];
      if (++idx[ax] < os[ax]) break;
      oa -= sa[ax] * os[ax];
      ob -= sb[ax] * os[ax];
      idx[ax] = 0;
      if (ax == 0) break;
    }
    if (rank == 1) break;
  }
}

// Sums g down to `target` (inverse of broadcasting).
Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (same_shape(g.shape(), target)) return g;
  Tensor out(target, 0.0);
  const Shape& gs = g.shape();
  const std::size_t rank = gs.size();
  const auto st = bcast_strides(target, gs);
  const double* pg = g.data();
  double* po = out.data();
  const std::size_t n = g.size();
  if (out.size() == 1) {
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += pg[i];
    po[0] = acc;
    return out;
  }
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t inner = gs[rank - 1];
  const std::size_t step = st[rank - 1];
  std::size_t oo = 0, i = 0;
  while (i < n) {
    std::size_t x = oo;
    for (std::size_t j = 0; j < inner; ++j, x += step) po[x] += pg[i + j];
    i += inner;
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      oo += st[ax];
      if (++idx[ax] < gs[ax]) break;
      oo -= st[ax] * gs[ax];
      idx[ax] = 0;
      if (ax == 0) break;
    }
    if (rank == 1) break;
  }
  return out;
}

template <class F, class DfA, class DfB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f,
                 DfA dfa, DfB dfb) {
  Tensor out(broadcast_shape(a.shape(), b.shape(), name));
  bcast_apply(a, b, out, f);
  Tape* tape = Tape::active();
  if (tape && (tape->tracks(a) || tape->tracks(b))) {
    tape->record(name, {&a, &b}, out,
                 [a, b, dfa, dfb](const Tensor& g) -> std::vector<Tensor> {
                   return {dfa(g, a, b), dfb(g, a, b)};
                 });
  }
  return out;
}

template <class F, class Df>
Tensor unary_op(const char* name, const Tensor& x, F f, Df df) {
  Tensor out(x.shape());
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t i = 0, n = x.size(); i < n; ++i) po[i] = f(px[i]);
  Tape* tape = Tape::active();
  if (tape && tape->tracks(x)) {
    tape->record(name, {&x}, out, [x, df](const Tensor& g) -> std::vector<Tensor> {
      Tensor dx(x.shape());
      const double* pg = g.data();
      const double* pi = x.data();
      double* pd = dx.data();
      for (std::size_t i = 0, n = dx.size(); i < n; ++i) pd[i] = df(pi[i]) * pg[i];
      return {dx};
    });
  }
  return out;
}

// ---------------- raw gemm kernels ----------------

void gemm_nn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t p, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* cr = c + i * n;
    std::fill(cr, cr + n, 0.0);
    const double* ar = a + i * p;
    for (std::size_t k = 0; k < p; ++k) {
      const double av = ar[k];
      const double* br = b + k * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

// c[m,n] = a[m,p] * b[n,p]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t p, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a + i * p;
    double* cr = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* br = b + j * p;
      double acc = 0;
      for (std::size_t k = 0; k < p; ++k) acc += ar[k] * br[k];
      cr[j] = acc;
    }
  }
}

// c[p,n] = a[m,p]^T * b[m,n]; rows of c in [row0,row1) only.
void gemm_tn_rows(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t p, std::size_t n, std::size_t row0,
                  std::size_t row1) {
  for (std::size_t k = row0; k < row1; ++k) {
    double* cr = c + k * n;
    std::fill(cr, cr + n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a[i * p + k];
      const double* br = b + i * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
    }
  }
}

struct MatDims {
  std::size_t m, p, n;         // effective product dims
  Shape batch;                 // broadcast batch shape
  std::vector<std::size_t> stride_a, stride_b;  // per batch axis, in matrices
};

MatDims matmul_dims(const Tensor& a, const Tensor& b, bool ta, bool tb,
                    const char* op) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError(std::string(op) + ": operands must have rank >= 2, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t ar = a.rank(), br = b.rank();
  const std::size_t am = a.shape()[ar - 2], an = a.shape()[ar - 1];
  const std::size_t bm = b.shape()[br - 2], bn = b.shape()[br - 1];
  MatDims d;
  d.m = ta ? an : am;
  const std::size_t ka = ta ? am : an;
  const std::size_t kb = tb ? bn : bm;
  d.n = tb ? bm : bn;
  if (ka != kb) {
    throw ShapeError(std::string(op) + ": inner dimensions differ: " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  d.p = ka;
  Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  d.batch = broadcast_shape(batch_a, batch_b, op);
  d.stride_a = bcast_strides(batch_a, d.batch);
  d.stride_b = bcast_strides(batch_b, d.batch);
  return d;
}

Tensor matmul_impl(const Tensor& a, const Tensor& b, bool ta, bool tb,
                   const char* op) {
  const MatDims d = matmul_dims(a, b, ta, tb, op);
  Shape os = d.batch;
  os.push_back(d.m);
  os.push_back(d.n);
  Tensor out(os);
  const std::size_t batches = numel(d.batch);
  const std::size_t mat_a = (ta ? d.p * d.m : d.m * d.p);
  const std::size_t mat_b = (tb ? d.n * d.p : d.p * d.n);
  const std::size_t mat_o = d.m * d.n;

  // linear batch index -> storage offsets via broadcast strides
  std::vector<std::size_t> off_a(batches, 0), off_b(batches, 0);
  {
    const std::size_t rank = d.batch.size();
    std::vector<std::size_t> idx(rank, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t bi = 0; bi < batches; ++bi) {
      off_a[bi] = oa * mat_a;
      off_b[bi] = ob * mat_b;
      for (std::size_t ax = rank; ax-- > 0;) {
        oa += d.stride_a[ax];
        ob += d.stride_b[ax];
        if (++idx[ax] < d.batch[ax]) break;
        oa -= d.stride_a[ax] * d.batch[ax];
        ob -= d.stride_b[ax] * d.batch[ax];
        idx[ax] = 0;
      }
    }
  }

  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  const std::size_t total_macs = batches * d.m * d.p * d.n;
  const bool par = total_macs >= kGemmParallelMacs && max_threads() > 1;

  if (!ta && !tb) {
    auto body = [&](std::size_t lo, std::size_t hi) {
      for (std::size_t r = lo; r < hi; ++r) {
        const std::size_t bi = r / d.m, i = r % d.m;
        const double* A = pa + off_a[bi];
        const double* B = pb + off_b[bi];
        double* C = po + bi * mat_o + i * d.n;
        std::fill(C, C + d.n, 0.0);
        const double* ar = A + i * d.p;
        for (std::size_t k = 0; k < d.p; ++k) {
          const double av = ar[k];
          const double* br = B + k * d.n;
          for (std::size_t j = 0; j < d.n; ++j) C[j] += av * br[j];
        }
      }
    };
    if (par) {
      parallel_for(batches * d.m, 8, body);
    } else {
      for (std::size_t bi = 0; bi < batches; ++bi) {
        gemm_nn(pa + off_a[bi], pb + off_b[bi], po + bi * mat_o, d.m, d.p, d.n);
      }
    }
  } else if (!ta && tb) {
    auto body = [&](std::size_t lo, std::size_t hi) {
      for (std::size_t r = lo; r < hi; ++r) {
        const std::size_t bi = r / d.m, i = r % d.m;
        const double* A = pa + off_a[bi];
        const double* B = pb + off_b[bi];
        double* C = po + bi * mat_o + i * d.n;
        const double* ar = A + i * d.p;
        for (std::size_t j = 0; j < d.n; ++j) {
          const double* br = B + j * d.p;
          double acc = 0;
          for (std::size_t k = 0; k < d.p; ++k) acc += ar[k] * br[k];
          C[j] = acc;
        }
      }
    };
    if (par) {
      parallel_for(batches * d.m, 8, body);
    } else {
      for (std::size_t bi = 0; bi < batches; ++bi) {
        gemm_nt(pa + off_a[bi], pb + off_b[bi], po + bi * mat_o, d.m, d.p, d.n);
      }
    }
  } else if (ta && !tb) {
    // out rows are k-indexed; parallelize over (batch, k)
    auto body = [&](std::size_t lo, std::size_t hi) {
      for (std::size_t r = lo; r < hi; ++r) {
        const std::size_t bi = r / d.m, k = r % d.m;
        gemm_tn_rows(pa + off_a[bi], pb + off_b[bi], po + bi * mat_o, d.p, d.m,
                     d.n, k, k + 1);
      }
    };
    if (par) {
      parallel_for(batches * d.m, 8, body);
    } else {
      for (std::size_t bi = 0; bi < batches; ++bi) {
        gemm_tn_rows(pa + off_a[bi], pb + off_b[bi], po + bi * mat_o, d.p, d.m,
                     d.n, 0, d.m);
      }
    }
  } else {
    throw ContractError("matmul_raw: double transpose not supported");
  }
  return out;
}

}  // namespace

// ---------------- construction ----------------

Tensor randn(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  double* p = t.data();
  for (std::size_t i = 0, n = t.size(); i < n; ++i) p[i] = rng.normal() * stddev;
  return t;
}

Tensor trunc_normal(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  double* p = t.data();
  for (std::size_t i = 0, n = t.size(); i < n; ++i) p[i] = rng.truncated_normal(stddev);
  return t;
}

Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  double* p = t.data();
  for (std::size_t i = 0, n = t.size(); i < n; ++i) p[i] = rng.uniform(lo, hi);
  return t;
}

Tensor arange(std::size_t n) {
  Tensor t(Shape{n});
  for (std::size_t i = 0; i < n; ++i) t.data()[i] = static_cast<double>(i);
  return t;
}

// ---------------- elementwise ----------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](const Tensor& g, const Tensor& a_, const Tensor&) {
        return reduce_to(g, a_.shape());
      },
      [](const Tensor& g, const Tensor&, const Tensor& b_) {
        return reduce_to(g, b_.shape());
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](const Tensor& g, const Tensor& a_, const Tensor&) {
        return reduce_to(g, a_.shape());
      },
      [](const Tensor& g, const Tensor&, const Tensor& b_) {
        Tensor n(g.shape());
        const double* pg = g.data();
        double* pn = n.data();
        for (std::size_t i = 0, c = n.size(); i < c; ++i) pn[i] = -pg[i];
        return reduce_to(n, b_.shape());
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](const Tensor& g, const Tensor& a_, const Tensor& b_) {
        Tensor t(g.shape());
        bcast_apply(g, b_, t, [](double x, double y) { return x * y; });
        return reduce_to(t, a_.shape());
      },
      [](const Tensor& g, const Tensor& a_, const Tensor& b_) {
        Tensor t(g.shape());
        bcast_apply(g, a_, t, [](double x, double y) { return x * y; });
        return reduce_to(t, b_.shape());
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](const Tensor& g, const Tensor& a_, const Tensor& b_) {
        Tensor t(g.shape());
        bcast_apply(g, b_, t, [](double x, double y) { return x / y; });
        return reduce_to(t, a_.shape());
      },
      [](const Tensor& g, const Tensor& a_, const Tensor& b_) {
        // d/db (a/b) = -a / b^2
        Tensor ratio(broadcast_shape(a_.shape(), b_.shape(), "div"));
        bcast_apply(a_, b_, ratio, [](double x, double y) { return -x / (y * y); });
        Tensor t(g.shape());
        bcast_apply(g, ratio, t, [](double x, double y) { return x * y; });
        return reduce_to(t, b_.shape());
      });
}

Tensor scale(const Tensor& x, double c) {
  return unary_op(
      "scale", x, [c](double v) { return c * v; }, [c](double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op(
      "add_scalar", x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      "neg", x, [](double v) { return -v; }, [](double) { return -1.0; });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v) { return v > 0 ? 1.0 : 0.0; });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      "abs", x, [](double v) { return std::abs(v); },
      [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  return unary_op(
      "gelu", x,
      [](double v) {
        return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
      },
      [](double v) {
        const double u = kGeluC * (v + kGeluA * v * v * v);
        const double t = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
      });
}

// ---------------- shape ops ----------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape) + " (element counts differ)");
  }
  Tensor out;
  out.st_ = x.st_;
  out.shape_ = std::move(shape);
  Tape* tape = Tape::active();
  if (tape && tape->tracks(x)) {
    Shape xs = x.shape();
    tape->record("reshape", {&x}, out, [xs](const Tensor& g) -> std::vector<Tensor> {
      return {reshape(g, xs)};
    });
  }
  return out;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.rank();
  if (axes.size() != rank) {
    throw ShapeError("permute: axis list size " + std::to_string(axes.size()) +
                     " does not match rank of " + shape_str(x.shape()));
  }
  std::vector<bool> seen(rank, false);
  for (std::size_t a : axes) {
    if (a >= rank || seen[a]) throw ShapeError("permute: invalid axis permutation");
    seen[a] = true;
  }
  Shape os(rank);
  for (std::size_t i = 0; i < rank; ++i) os[i] = x.shape()[axes[i]];
  Tensor out(os);

  std::vector<std::size_t> xstrides(rank, 1);
  for (std::size_t i = rank - 1; i-- > 0;) xstrides[i] = xstrides[i + 1] * x.shape()[i + 1];
  std::vector<std::size_t> src_stride(rank);
  for (std::size_t i = 0; i < rank; ++i) src_stride[i] = xstrides[axes[i]];

  const double* px = x.data();
  double* po = out.data();
  const std::size_t n = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  const std::size_t inner = os[rank - 1];
  const std::size_t inner_step = src_stride[rank - 1];
  std::size_t o = 0;
  while (o < n) {
    std::size_t s = src;
    for (std::size_t j = 0; j < inner; ++j, s += inner_step) po[o + j] = px[s];
    o += inner;
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      src += src_stride[ax];
      if (++idx[ax] < os[ax]) break;
      src -= src_stride[ax] * os[ax];
      idx[ax] = 0;
      if (ax == 0) break;
    }
    if (rank == 1) break;
  }

  Tape* tape = Tape::active();
  if (tape && tape->tracks(x)) {
    std::vector<std::size_t> inv(rank);
    for (std::size_t i = 0; i < rank; ++i) inv[axes[i]] = i;
    tape->record("permute", {&x}, out, [inv](const Tensor& g) -> std::vector<Tensor> {
      return {permute(g, inv)};
    });
  }
  return out;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose: rank must be >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> axes(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
  return permute(x, axes);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t rank = parts[0].rank();
  if (axis >= rank) throw ShapeError("concat: axis out of range");
  Shape os = parts[0].shape();
  std::size_t total = 0;
  for (const Tensor& t : parts) {
    if (t.rank() != rank) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < rank; ++i) {
      if (i != axis && t.shape()[i] != os[i]) {
        throw ShapeError("concat: shape " + shape_str(t.shape()) +
                         " incompatible with " + shape_str(os) + " on axis " +
                         std::to_string(axis));
      }
    }
    total += t.shape()[axis];
  }
  os[axis] = total;
  Tensor out(os);

  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= os[i];
  for (std::size_t i = axis + 1; i < rank; ++i) inner *= os[i];
  double* po = out.data();
  const std::size_t out_row = total * inner;
  std::size_t at = 0;
  for (const Tensor& t : parts) {
    const std::size_t len = t.shape()[axis] * inner;
    const double* pt = t.data();
    for (std::size_t r = 0; r < outer; ++r) {
      std::memcpy(po + r * out_row + at, pt + r * len, len * sizeof(double));
    }
    at += len;
  }

  Tape* tape = Tape::active();
  bool any = false;
  if (tape) {
    for (const Tensor& t : parts)
      if (tape->tracks(t)) any = true;
  }
  if (any) {
    std::vector<const Tensor*> ins;
    for (const Tensor& t : parts) ins.push_back(&t);
    std::vector<std::size_t> extents;
    for (const Tensor& t : parts) extents.push_back(t.shape()[axis]);
    auto back = [extents, axis](const Tensor& g) -> std::vector<Tensor> {
      std::vector<Tensor> grads;
      std::size_t at2 = 0;
      for (std::size_t e : extents) {
        grads.push_back(slice(g, axis, at2, at2 + e));
        at2 += e;
      }
      return grads;
    };
    tape->record("concat", ins, out, back);
  }
  return out;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t stop) {
  if (axis >= x.rank()) throw ShapeError("slice: axis out of range for " + shape_str(x.shape()));
  if (start >= stop || stop > x.shape()[axis]) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(stop) + ") invalid for axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  Shape os = x.shape();
  os[axis] = stop - start;
  Tensor out(os);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  const std::size_t src_row = x.shape()[axis] * inner;
  const std::size_t dst_row = (stop - start) * inner;
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t r = 0; r < outer; ++r) {
    std::memcpy(po + r * dst_row, px + r * src_row + start * inner,
                dst_row * sizeof(double));
  }
  Tape* tape = Tape::active();
  if (tape && tape->tracks(x)) {
    Shape xs = x.shape();
    tape->record("slice", {&x}, out,
                 [xs, axis, start, stop, outer, inner, src_row,
                  dst_row](const Tensor& g) -> std::vector<Tensor> {
                   Tensor dx(xs, 0.0);
                   double* pd = dx.data();
                   const double* pg = g.data();
                   for (std::size_t r = 0; r < outer; ++r) {
                     std::memcpy(pd + r * src_row + start * inner, pg + r * dst_row,
                                 dst_row * sizeof(double));
                   }
                   return {dx};
                 });
  }
  return out;
}

Tensor expand(const Tensor& x, const Shape& target) {
  const Shape os = broadcast_shape(x.shape(), target, "expand");
  if (!same_shape(os, target)) {
    throw ShapeError("expand: " + shape_str(x.shape()) + " does not broadcast to " +
                     shape_str(target));
  }
  Tensor zero(Shape{}, 0.0);
  // reuse broadcast machinery: out = x + 0
  Tensor out(target);
  bcast_apply(x, zero, out, [](double a, double) { return a; });
  Tape* tape = Tape::active();
  if (tape && tape->tracks(x)) {
    Shape xs = x.shape();
    tape->record("expand", {&x}, out, [xs](const Tensor& g) -> std::vector<Tensor> {
      return {reduce_to(g, xs)};
    });
  }
  return out;
}

// ---------------- reductions ----------------

Tensor sum(const Tensor& x) {
  double acc = 0;
  const double* px = x.data();
  for (std::size_t i = 0, n = x.size(); i < n; ++i) acc += px[i];
  Tensor out = Tensor::scalar(acc);
  Tape* tape = Tape::active();
  if (tape && tape->tracks(x)) {
    Shape xs = x.shape();
    tape->record("sum", {&x}, out, [xs](const Tensor& g) -> std::vector<Tensor> {
      return {Tensor(xs, g.data()[0])};
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.size());
  double acc = 0;
  const double* px = x.data();
  for (std::size_t i = 0, n = x.size(); i < n; ++i) acc += px[i];
  Tensor out = Tensor::scalar(acc * inv);
  Tape* tape = Tape::active();
  if (tape && tape->tracks(x)) {
    Shape xs = x.shape();
    tape->record("mean", {&x}, out, [xs, inv](const Tensor& g) -> std::vector<Tensor> {
      return {Tensor(xs, g.data()[0] * inv)};
    });
  }
  return out;
}

namespace {
Tensor reduce_axis_impl(const char* name, const Tensor& x, std::size_t axis,
                        bool keepdim, bool take_mean) {
  if (axis >= x.rank()) {
    throw ShapeError(std::string(name) + ": axis out of range for " + shape_str(x.shape()));
  }
  const std::size_t len = x.shape()[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  Shape os;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i == axis) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(x.shape()[i]);
    }
  }
  Tensor out(os, 0.0);
  const double* px = x.data();
  double* po = out.data();
  const double w = take_mean ? 1.0 / static_cast<double>(len) : 1.0;
  for (std::size_t r = 0; r < outer; ++r) {
    const double* base = px + r * len * inner;
    double* ob = po + r * inner;
    for (std::size_t k = 0; k < len; ++k) {
      const double* row = base + k * inner;
      for (std::size_t j = 0; j < inner; ++j) ob[j] += row[j];
    }
    if (take_mean) {
      for (std::size_t j = 0; j < inner; ++j) ob[j] *= w;
    }
  }
  Tape* tape = Tape::active();
  if (tape && tape->tracks(x)) {
    Shape xs = x.shape();
    tape->record(name, {&x}, out,
                 [xs, len, outer, inner, w](const Tensor& g) -> std::vector<Tensor> {
                   Tensor dx(xs);
                   const double* pg = g.data();
                   double* pd = dx.data();
                   for (std::size_t r = 0; r < outer; ++r) {
                     const double* gb = pg + r * inner;
                     double* base = pd + r * len * inner;
                     for (std::size_t k = 0; k < len; ++k) {
                       double* row = base + k * inner;
                       for (std::size_t j = 0; j < inner; ++j) row[j] = gb[j] * w;
                     }
                   }
                   return {dx};
                 });
  }
  return out;
}
}  // namespace

Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  return reduce_axis_impl("sum_axis", x, axis, keepdim, false);
}

Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  return reduce_axis_impl("mean_axis", x, axis, keepdim, true);
}

Tensor max_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  if (axis >= x.rank()) {
    throw ShapeError("max_axis: axis out of range for " + shape_str(x.shape()));
  }
  const std::size_t len = x.shape()[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape()[i];
  Shape os;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i == axis) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(x.shape()[i]);
    }
  }
  Tensor out(os);
  std::vector<std::size_t> arg(outer * inner);
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t r = 0; r < outer * inner; ++r) {
    const std::size_t o = r / inner, j = r % inner;
    const double* base = px + (o * len) * inner + j;
    double best = base[0];
    std::size_t bi = 0;
    for (std::size_t k = 1; k < len; ++k) {
      if (base[k * inner] > best) {
        best = base[k * inner];
        bi = k;
      }
    }
    po[o * inner + j] = best;
    arg[r] = bi;
  }
  Tape* tape = Tape::active();
  if (tape && tape->tracks(x)) {
    Shape xs = x.shape();
    tape->record("max_axis", {&x}, out,
                 [xs, arg, len, outer, inner](const Tensor& g) -> std::vector<Tensor> {
                   Tensor dx(xs, 0.0);
                   const double* pg = g.data();
                   double* pd = dx.data();
                   for (std::size_t r = 0; r < outer * inner; ++r) {
                     const std::size_t o = r / inner, j = r % inner;
                     pd[(o * len + arg[r]) * inner + j] = pg[o * inner + j];
                   }
                   return {dx};
                 });
  }
  return out;
}

// ---------------- matmul ----------------

Tensor matmul_raw(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  return matmul_impl(a, b, ta, tb, "matmul_raw");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor out = matmul_impl(a, b, false, false, "matmul");
  Tape* tape = Tape::active();
  if (tape && (tape->tracks(a) || tape->tracks(b))) {
    const bool need_a = tape->tracks(a);
    const bool need_b = tape->tracks(b);
    tape->record("matmul", {&a, &b}, out,
                 [a, b, need_a, need_b](const Tensor& g) -> std::vector<Tensor> {
                   Tensor da, db;
                   if (need_a) da = reduce_to(matmul_impl(g, b, false, true, "matmul"), a.shape());
                   if (need_b) db = reduce_to(matmul_impl(a, g, true, false, "matmul"), b.shape());
                   return {da, db};
                 });
  }
  return out;
}

// ---------------- softmax ----------------

Tensor softmax(const Tensor& x, int axis) {
  const int rank = static_cast<int>(x.rank());
  if (rank == 0) throw ShapeError("softmax: scalar input");
  int ax = axis < 0 ? axis + rank : axis;
  if (ax < 0 || ax >= rank) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " +
                     shape_str(x.shape()));
  }
  const std::size_t a = static_cast<std::size_t>(ax);
  const std::size_t len = x.shape()[a];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < a; ++i) outer *= x.shape()[i];
  for (std::size_t i = a + 1; i < x.rank(); ++i) inner *= x.shape()[i];

  Tensor out(x.shape());
  const double* px = x.data();
  double* po = out.data();
  auto run = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t r = lo; r < hi; ++r) {
      const std::size_t o = r / inner, j = r % inner;
      const double* base = px + (o * len) * inner + j;
      double* ob = po + (o * len) * inner + j;
      double mx = base[0];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, base[k * inner]);
      double denom = 0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(base[k * inner] - mx);
        ob[k * inner] = e;
        denom += e;
      }
      const double invd = 1.0 / denom;
      for (std::size_t k = 0; k < len; ++k) ob[k * inner] *= invd;
    }
  };
  const std::size_t slices = outer * inner;
  if (slices * len >= (1u << 20) && max_threads() > 1) {
    parallel_for(slices, 64, run);
  } else {
    run(0, slices);
  }

  Tape* tape = Tape::active();
  if (tape && tape->tracks(x)) {
    tape->record("softmax", {&x}, out,
                 [out, len, outer, inner](const Tensor& g) -> std::vector<Tensor> {
                   Tensor dx(out.shape());
                   const double* py = out.data();
                   const double* pg = g.data();
                   double* pd = dx.data();
                   for (std::size_t r = 0; r < outer * inner; ++r) {
                     const std::size_t o = r / inner, j = r % inner;
                     const std::size_t base = (o * len) * inner + j;
                     double dot = 0;
                     for (std::size_t k = 0; k < len; ++k) {
                       dot += pg[base + k * inner] * py[base + k * inner];
                     }
                     for (std::size_t k = 0; k < len; ++k) {
                       const std::size_t idx = base + k * inner;
                       pd[idx] = py[idx] * (pg[idx] - dot);
                     }
                   }
                   return {dx};
                 });
  }
  return out;
}

// ---------------- layer norm ----------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: input must have rank >= 1");
  const std::size_t d = x.shape().back();
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gamma/beta must be [" + std::to_string(d) +
                     "], got " + shape_str(gamma.shape()) + " and " +
                     shape_str(beta.shape()));
  }
  if (eps <= 0) throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.size() / d;

  Tensor out(x.shape());
  Tensor xhat(x.shape());       // saved for backward
  Tensor inv_std(Shape{rows});  // saved for backward
  const double* px = x.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();
  double* po = out.data();
  double* ph = xhat.data();
  double* pi = inv_std.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = px + r * d;
    double mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    pi[r] = inv;
    double* orow = po + r * d;
    double* hrow = ph + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * inv;
      hrow[j] = h;
      orow[j] = pg[j] * h + pb[j];
    }
  }

  Tape* tape = Tape::active();
  if (tape && (tape->tracks(x) || tape->tracks(gamma) || tape->tracks(beta))) {
    tape->record(
        "layer_norm", {&x, &gamma, &beta}, out,
        [xhat, inv_std, gamma, rows, d](const Tensor& g) -> std::vector<Tensor> {
          Tensor dx(Shape(xhat.shape()));
          Tensor dgamma(Shape{d}, 0.0);
          Tensor dbeta(Shape{d}, 0.0);
          const double* ph2 = xhat.data();
          const double* pi2 = inv_std.data();
          const double* pgm = gamma.data();
          const double* pg2 = g.data();
          double* pdx = dx.data();
          double* pdg = dgamma.data();
          double* pdb = dbeta.data();
          const double invd = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* grow = pg2 + r * d;
            const double* hrow = ph2 + r * d;
            double m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gg = grow[j] * pgm[j];
              m1 += gg;
              m2 += gg * hrow[j];
              pdg[j] += grow[j] * hrow[j];
              pdb[j] += grow[j];
            }
            m1 *= invd;
            m2 *= invd;
            double* dxr = pdx + r * d;
            const double inv = pi2[r];
            for (std::size_t j = 0; j < d; ++j) {
              const double gg = grow[j] * pgm[j];
              dxr[j] = inv * (gg - m1 - hrow[j] * m2);
            }
          }
          return {dx, dgamma, dbeta};
        });
  }
  return out;
}

// ---------------- conv2d ----------------

namespace {
struct ConvGeom {
  std::size_t B, Cin, H, W, Cout, kh, kw, Ho, Wo, stride, pad, patch;
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& w, const Tensor& b,
                       std::size_t stride, std::size_t pad) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv2d: x must be [B,Cin,H,W] and w [Cout,Cin,kh,kw], got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  ConvGeom g;
  g.B = x.shape()[0];
  g.Cin = x.shape()[1];
  g.H = x.shape()[2];
  g.W = x.shape()[3];
  g.Cout = w.shape()[0];
  g.kh = w.shape()[2];
  g.kw = w.shape()[3];
  g.stride = stride;
  g.pad = pad;
  if (w.shape()[1] != g.Cin) {
    throw ShapeError("conv2d: channel mismatch: " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  }
  if (b.defined() && b.shape() != Shape{g.Cout}) {
    throw ShapeError("conv2d: bias must be [" + std::to_string(g.Cout) + "], got " +
                     shape_str(b.shape()));
  }
  if (g.kh % 2 == 0 || g.kw % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
  if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2");
  if (g.H + 2 * pad < g.kh || g.W + 2 * pad < g.kw) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  g.Ho = (g.H + 2 * pad - g.kh) / stride + 1;
  g.Wo = (g.W + 2 * pad - g.kw) / stride + 1;
  g.patch = g.Cin * g.kh * g.kw;
  return g;
}

// Gathers padded patches of sample `b` into cols [Ho*Wo, Cin*kh*kw].
void im2col(const ConvGeom& g, const double* x, std::size_t b, double* cols) {
  const double* xb = x + b * g.Cin * g.H * g.W;
  for (std::size_t oy = 0; oy < g.Ho; ++oy) {
    for (std::size_t ox = 0; ox < g.Wo; ++ox) {
      double* row = cols + (oy * g.Wo + ox) * g.patch;
      const long y0 = static_cast<long>(oy * g.stride) - static_cast<long>(g.pad);
      const long x0 = static_cast<long>(ox * g.stride) - static_cast<long>(g.pad);
      std::size_t idx = 0;
      for (std::size_t c = 0; c < g.Cin; ++c) {
        const double* plane = xb + c * g.H * g.W;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const long y = y0 + static_cast<long>(ky);
          for (std::size_t kx = 0; kx < g.kw; ++kx, ++idx) {
            const long xx = x0 + static_cast<long>(kx);
            row[idx] = (y < 0 || y >= static_cast<long>(g.H) || xx < 0 ||
                        xx >= static_cast<long>(g.W))
                           ? 0.0
                           : plane[y * static_cast<long>(g.W) + xx];
          }
        }
      }
    }
  }
}
}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              std::size_t stride, std::size_t padding) {
  const ConvGeom g = conv_geometry(x, w, b, stride, padding);
  Tensor out(Shape{g.B, g.Cout, g.Ho, g.Wo});
  {
    Tensor cols(Shape{g.Ho * g.Wo, g.patch});
    const double* pw = w.data();
    const double* pbias = b.defined() ? b.data() : nullptr;
    double* po = out.data();
    for (std::size_t s = 0; s < g.B; ++s) {
      im2col(g, x.data(), s, cols.data());
      // per output pixel row, dot with each filter; parallel over pixels
      const double* pc = cols.data();
      double* ob = po + s * g.Cout * g.Ho * g.Wo;
      auto body = [&](std::size_t lo, std::size_t hi) {
        for (std::size_t r = lo; r < hi; ++r) {
          const double* row = pc + r * g.patch;
          for (std::size_t c = 0; c < g.Cout; ++c) {
            const double* wr = pw + c * g.patch;
            double acc = pbias ? pbias[c] : 0.0;
            for (std::size_t k = 0; k < g.patch; ++k) acc += row[k] * wr[k];
            ob[c * g.Ho * g.Wo + r] = acc;
          }
        }
      };
      const std::size_t pixels = g.Ho * g.Wo;
      if (pixels * g.Cout * g.patch >= kGemmParallelMacs && max_threads() > 1) {
        parallel_for(pixels, 16, body);
      } else {
        body(0, pixels);
      }
    }
  }

  Tape* tape = Tape::active();
  if (tape && (tape->tracks(x) || tape->tracks(w) || (b.defined() && tape->tracks(b)))) {
    const bool has_bias = b.defined();
    auto back = [x, w, g, has_bias](const Tensor& gr) -> std::vector<Tensor> {
      Tensor dx(Shape(x.shape()), 0.0);
      Tensor dw(Shape(w.shape()), 0.0);
      Tensor db = has_bias ? Tensor(Shape{g.Cout}, 0.0) : Tensor();
      Tensor cols(Shape{g.Ho * g.Wo, g.patch});
      Tensor dcols(Shape{g.Ho * g.Wo, g.patch});
      const std::size_t pixels = g.Ho * g.Wo;
      const double* pg = gr.data();
      const double* pw = w.data();
      double* pdw = dw.data();
      double* pdx = dx.data();
      for (std::size_t s = 0; s < g.B; ++s) {
        im2col(g, x.data(), s, cols.data());
        const double* gb = pg + s * g.Cout * pixels;  // [Cout, pixels]
        // dW[c,:] += sum_r gb[c,r] * cols[r,:]
        for (std::size_t c = 0; c < g.Cout; ++c) {
          double* dwr = pdw + c * g.patch;
          const double* gc = gb + c * pixels;
          for (std::size_t r = 0; r < pixels; ++r) {
            const double gv = gc[r];
            if (gv == 0.0) continue;
            const double* row = cols.data() + r * g.patch;
            for (std::size_t k = 0; k < g.patch; ++k) dwr[k] += gv * row[k];
          }
        }
        if (has_bias) {
          double* pdb = db.data();
          for (std::size_t c = 0; c < g.Cout; ++c) {
            const double* gc = gb + c * pixels;
            double acc = 0;
            for (std::size_t r = 0; r < pixels; ++r) acc += gc[r];
            pdb[c] += acc;
          }
        }
        // dcols[r,:] = sum_c gb[c,r] * w[c,:]
        double* pdc = dcols.data();
        auto body = [&](std::size_t lo, std::size_t hi) {
          for (std::size_t r = lo; r < hi; ++r) {
            double* row = pdc + r * g.patch;
            std::fill(row, row + g.patch, 0.0);
            for (std::size_t c = 0; c < g.Cout; ++c) {
              const double gv = gb[c * pixels + r];
              const double* wr = pw + c * g.patch;
              for (std::size_t k = 0; k < g.patch; ++k) row[k] += gv * wr[k];
            }
          }
        };
        if (pixels * g.Cout * g.patch >= kGemmParallelMacs && max_threads() > 1) {
          parallel_for(pixels, 16, body);
        } else {
          body(0, pixels);
        }
        // col2im scatter-add
        double* xb = pdx + s * g.Cin * g.H * g.W;
        for (std::size_t oy = 0; oy < g.Ho; ++oy) {
          for (std::size_t ox = 0; ox < g.Wo; ++ox) {
            const double* row = pdc + (oy * g.Wo + ox) * g.patch;
            const long y0 = static_cast<long>(oy * g.stride) - static_cast<long>(g.pad);
            const long x0 = static_cast<long>(ox * g.stride) - static_cast<long>(g.pad);
            std::size_t idx = 0;
            for (std::size_t c = 0; c < g.Cin; ++c) {
              double* plane = xb + c * g.H * g.W;
              for (std::size_t ky = 0; ky < g.kh; ++ky) {
                const long y = y0 + static_cast<long>(ky);
                for (std::size_t kx = 0; kx < g.kw; ++kx, ++idx) {
                  const long xx = x0 + static_cast<long>(kx);
                  if (y < 0 || y >= static_cast<long>(g.H) || xx < 0 ||
                      xx >= static_cast<long>(g.W)) {
                    continue;
                  }
                  plane[y * static_cast<long>(g.W) + xx] += row[idx];
                }
              }
            }
          }
        }
      }
      return {dx, dw, db};
    };
    if (b.defined()) {
      tape->record("conv2d", {&x, &w, &b}, out, back);
    } else {
      auto back2 = [back](const Tensor& gr) -> std::vector<Tensor> {
        auto v = back(gr);
        v.pop_back();
        return v;
      };
      tape->record("conv2d", {&x, &w}, out, back2);
    }
  }
  return out;
}

// ---------------- real 2D DFT ----------------

namespace {
// out = Cn * x * Cd - Sn * x * Sd for each batch of x[B,n,d]; the map is its
// own adjoint (the cosine/sine matrices are symmetric), so backward reuses it.
Tensor dft2_apply(const Tensor& x) {
  const std::size_t B = x.shape()[0], n = x.shape()[1], d = x.shape()[2];
  std::vector<double> cd(d * d), sd(d * d);
  for (std::size_t k = 0; k < d; ++k) {
    for (std::size_t j = 0; j < d; ++j) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>((k * j) % d) /
                       static_cast<double>(d);
      cd[k * d + j] = std::cos(a);
      sd[k * d + j] = std::sin(a);
    }
  }
  std::vector<double> cn(n), sn(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(r) / static_cast<double>(n);
    cn[r] = std::cos(a);
    sn[r] = std::sin(a);
  }

  // hidden-axis pass
  Tensor yre(Shape{B, n, d});
  Tensor yim(Shape{B, n, d});  // holds x * Sd; the sign flip is applied below
  const double* px = x.data();
  {
    auto body = [&](std::size_t lo, std::size_t hi) {
      for (std::size_t row = lo; row < hi; ++row) {
        const double* xr = px + row * d;
        double* re = yre.data() + row * d;
        double* im = yim.data() + row * d;
        std::fill(re, re + d, 0.0);
        std::fill(im, im + d, 0.0);
        for (std::size_t k = 0; k < d; ++k) {
          const double v = xr[k];
          const double* cr = cd.data() + k * d;
          const double* sr = sd.data() + k * d;
          for (std::size_t j = 0; j < d; ++j) {
            re[j] += v * cr[j];
            im[j] += v * sr[j];
          }
        }
      }
    };
    const std::size_t rows = B * n;
    if (rows * d * d >= kGemmParallelMacs && max_threads() > 1) {
      parallel_for(rows, 8, body);
    } else {
      body(0, rows);
    }
  }

  // sequence-axis pass: out[i,:] = sum_t cos(2pi it/n) yre[t,:] - sin(..) yim[t,:]
  Tensor out(Shape{B, n, d});
  auto body = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t r = lo; r < hi; ++r) {
      const std::size_t b = r / n, i = r % n;
      double* orow = out.data() + (b * n + i) * d;
      std::fill(orow, orow + d, 0.0);
      const double* re0 = yre.data() + b * n * d;
      const double* im0 = yim.data() + b * n * d;
      for (std::size_t t = 0; t < n; ++t) {
        const std::size_t a = (i * t) % n;
        const double c = cn[a], s = sn[a];
        const double* re = re0 + t * d;
        const double* im = im0 + t * d;
        for (std::size_t j = 0; j < d; ++j) orow[j] += c * re[j] - s * im[j];
      }
    }
  };
  const std::size_t rows = B * n;
  if (rows * n * d >= kGemmParallelMacs && max_threads() > 1) {
    parallel_for(rows, 4, body);
  } else {
    body(0, rows);
  }
  return out;
}
}  // namespace

Tensor dft2_real(const Tensor& x) {
  if (x.rank() != 3) {
    throw ShapeError("dft2_real: input must be [B,n,d], got " + shape_str(x.shape()));
  }
  Tensor out = dft2_apply(x);
  Tape* tape = Tape::active();
  if (tape && tape->tracks(x)) {
    tape->record("dft2_real", {&x}, out, [](const Tensor& g) -> std::vector<Tensor> {
      return {dft2_apply(g)};
    });
  }
  return out;
}

// ---------------- rotary position map ----------------

namespace {
void rope_apply(const Tensor& x, Tensor& out, double base, bool inverse) {
  const std::size_t B = x.shape()[0], H = x.shape()[1], n = x.shape()[2],
                    dh = x.shape()[3];
  const std::size_t half = dh / 2;
  std::vector<double> cosv(n * half), sinv(n * half);
  for (std::size_t m = 0; m < n; ++m) {
    for (std::size_t j = 0; j < half; ++j) {
      const double theta =
          std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(dh));
      const double a = static_cast<double>(m) * theta;
      cosv[m * half + j] = std::cos(a);
      sinv[m * half + j] = inverse ? -std::sin(a) : std::sin(a);
    }
  }
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t bh = 0; bh < B * H; ++bh) {
    for (std::size_t m = 0; m < n; ++m) {
      const double* row = px + (bh * n + m) * dh;
      double* orow = po + (bh * n + m) * dh;
      const double* c = cosv.data() + m * half;
      const double* s = sinv.data() + m * half;
      for (std::size_t j = 0; j < half; ++j) {
        const double x0 = row[2 * j], x1 = row[2 * j + 1];
        orow[2 * j] = c[j] * x0 - s[j] * x1;
        orow[2 * j + 1] = s[j] * x0 + c[j] * x1;
      }
    }
  }
}
}  // namespace

Tensor rope(const Tensor& x, double base) {
  if (x.rank() != 4) {
    throw ShapeError("rope: input must be [B,H,n,dh], got " + shape_str(x.shape()));
  }
  if (x.shape()[3] % 2 != 0) {
    throw ConfigError("rope: head dimension must be even, got " +
                      std::to_string(x.shape()[3]));
  }
  if (base <= 0) throw ConfigError("rope: base must be positive");
  Tensor out(x.shape());
  rope_apply(x, out, base, false);
  Tape* tape = Tape::active();
  if (tape && tape->tracks(x)) {
    tape->record("rope", {&x}, out, [base](const Tensor& g) -> std::vector<Tensor> {
      Tensor dx(g.shape());
      rope_apply(g, dx, base, true);
      return {dx};
    });
  }
  return out;
}

// ---------------- segment mean ----------------

Tensor segment_mean(const Tensor& x, std::size_t m) {
  if (x.rank() != 4) {
    throw ShapeError("segment_mean: input must be [B,H,n,dh], got " + shape_str(x.shape()));
  }
  const std::size_t B = x.shape()[0], H = x.shape()[1], n = x.shape()[2],
                    dh = x.shape()[3];
  if (m == 0 || m > n) {
    throw ConfigError("segment_mean: need 1 <= m <= n, got m=" + std::to_string(m) +
                      " n=" + std::to_string(n));
  }
  const std::size_t base = n / m;  // last segment takes base + n % m tokens
  Tensor out(Shape{B, H, m, dh}, 0.0);
  const double* px = x.data();
  double* po = out.data();
  for (std::size_t bh = 0; bh < B * H; ++bh) {
    const double* xb = px + bh * n * dh;
    double* ob = po + bh * m * dh;
    for (std::size_t s = 0; s < m; ++s) {
      const std::size_t t0 = s * base;
      const std::size_t t1 = (s + 1 == m) ? n : t0 + base;
      double* orow = ob + s * dh;
      for (std::size_t t = t0; t < t1; ++t) {
        const double* row = xb + t * dh;
        for (std::size_t j = 0; j < dh; ++j) orow[j] += row[j];
      }
      const double inv = 1.0 / static_cast<double>(t1 - t0);
      for (std::size_t j = 0; j < dh; ++j) orow[j] *= inv;
    }
  }
  Tape* tape = Tape::active();
  if (tape && tape->tracks(x)) {
    Shape xs = x.shape();
    tape->record("segment_mean", {&x}, out,
                 [xs, B, H, n, m, dh, base](const Tensor& g) -> std::vector<Tensor> {
                   Tensor dx(xs);
                   const double* pg = g.data();
                   double* pd = dx.data();
                   for (std::size_t bh = 0; bh < B * H; ++bh) {
                     const double* gb = pg + bh * m * dh;
                     double* db = pd + bh * n * dh;
                     for (std::size_t s = 0; s < m; ++s) {
                       const std::size_t t0 = s * base;
                       const std::size_t t1 = (s + 1 == m) ? n : t0 + base;
                       const double inv = 1.0 / static_cast<double>(t1 - t0);
                       const double* grow = gb + s * dh;
                       for (std::size_t t = t0; t < t1; ++t) {
                         double* drow = db + t * dh;
                         for (std::size_t j = 0; j < dh; ++j) drow[j] = grow[j] * inv;
                       }
                     }
                   }
                   return {dx};
                 });
  }
  return out;
}

// ---------------- dropout ----------------

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p < 0 || p >= 1) throw ConfigError("dropout: p must be in [0,1)");
  if (p == 0.0) return x;
  Tensor mask(x.shape());
  const double keep = 1.0 - p;
  double* pm = mask.data();
  for (std::size_t i = 0, n = mask.size(); i < n; ++i) {
    pm[i] = rng.uniform() < p ? 0.0 : 1.0 / keep;
  }
  return mul(x, mask);
}

// ---------------- cross entropy ----------------

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) {
    throw ShapeError("cross_entropy: logits must be [B,C], got " + shape_str(logits.shape()));
  }
  const std::size_t B = logits.shape()[0], C = logits.shape()[1];
  if (labels.size() != B) {
    throw ContractError("cross_entropy: got " + std::to_string(labels.size()) +
                        " labels for batch " + std::to_string(B));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= C) {
      throw ContractError("cross_entropy: label " + std::to_string(y) +
                          " outside [0," + std::to_string(C) + ")");
    }
  }
  Tensor probs(logits.shape());  // softmax, saved for backward
  const double* pl = logits.data();
  double* pp = probs.data();
  double loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = pl + b * C;
    double mx = row[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double denom = 0;
    for (std::size_t c = 0; c < C; ++c) denom += std::exp(row[c] - mx);
    const double lse = mx + std::log(denom);
    loss += lse - row[static_cast<std::size_t>(labels[b])];
    double* prow = pp + b * C;
    const double inv = 1.0 / denom;
    for (std::size_t c = 0; c < C; ++c) prow[c] = std::exp(row[c] - mx) * inv;
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(B));
  Tape* tape = Tape::active();
  if (tape && tape->tracks(logits)) {
    std::vector<int> lab = labels;
    tape->record("cross_entropy", {&logits}, out,
                 [probs, lab, B, C](const Tensor& g) -> std::vector<Tensor> {
                   Tensor dl(probs.shape());
                   const double gv = g.data()[0] / static_cast<double>(B);
                   const double* pp2 = probs.data();
                   double* pd = dl.data();
                   for (std::size_t b = 0; b < B; ++b) {
                     for (std::size_t c = 0; c < C; ++c) {
                       double v = pp2[b * C + c];
                       if (static_cast<std::size_t>(lab[b]) == c) v -= 1.0;
                       pd[b * C + c] = v * gv;
                     }
                   }
                   return {dl};
                 });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  if (!b.defined()) return y;
  return add(y, b);
}

void add_inplace(Tensor& dst, const Tensor& src, double scl) {
  if (!same_shape(dst.shape(), src.shape())) {
    throw ShapeError("add_inplace: shape mismatch " + shape_str(dst.shape()) +
                     " vs " + shape_str(src.shape()));
  }
  double* pd = dst.data();
  const double* ps = src.data();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) pd[i] += scl * ps[i];
}

}  // namespace vx
