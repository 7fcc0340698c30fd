#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "support/oracles.hpp"
#include "vx/gradcheck.hpp"
#include "vx/ops.hpp"

using namespace vx;

namespace {

// Random weights used to reduce an op output to a scalar; random weighting
// avoids cancellation hiding a wrong gradient.
Tensor rand_weights(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  return uniform(Shape(s), rng, 0.25, 1.75);
}

// Draws values with |v| >= margin so kinked ops (relu) stay away from the
// non-differentiable point during finite differencing.
Tensor randn_away_from_zero(Shape s, Rng& rng, double margin) {
  Tensor t = randn(std::move(s), rng);
  for (std::size_t i = 0; i < t.size(); ++i) {
    double& v = t.data()[i];
    v += v >= 0 ? margin : -margin;
  }
  return t;
}

double check1(const std::function<Tensor(const Tensor&)>& f, Tensor input) {
  auto wrapped = [&](const std::vector<Tensor>& in) { return f(in[0]); };
  return grad_check(wrapped, {std::move(input)}).worst;
}

}  // namespace

// ---------------------------- matmul ----------------------------

TEST_CASE("matmul: identity times M returns M") {
  Rng rng(7);
  Tensor m = randn({3, 3}, rng);
  Tensor eye(Shape{3, 3}, 0.0);
  for (int i = 0; i < 3; ++i) eye.data()[i * 3 + i] = 1.0;
  Tensor out = matmul(eye, m);
  CHECK(oracle::max_abs_diff(out, m) == 0.0);
}

TEST_CASE("matmul: hand-computed 2x2 by 2x1") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 1}, {0, 1});
  Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c.data()[0] == 2.0);
  CHECK(c.data()[1] == 4.0);
}

TEST_CASE("matmul: grad of sum(a@b) wrt a is ones*b^T, and FD agrees") {
  Rng rng(11);
  Tensor a = randn({4, 5}, rng);
  Tensor b = randn({5, 6}, rng);
  a.set_requires_grad();
  {
    Tape tape;
    Tensor loss = sum(matmul(a, b));
    tape.backward(loss);
    const Tensor& g = tape.grad(a);
    // closed form: g[i,k] = sum_j b[k,j]
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t k = 0; k < 5; ++k) {
        double want = 0;
        for (std::size_t j = 0; j < 6; ++j) want += b.data()[k * 6 + j];
        CHECK(g.data()[i * 5 + k] == doctest::Approx(want).epsilon(1e-12));
      }
  }
  auto f = [&](const std::vector<Tensor>& in) { return sum(matmul(in[0], in[1])); };
  CHECK(grad_check(f, {a, b}).worst < 1e-4);
}

TEST_CASE("matmul: shape mismatch names both shapes") {
  Tensor a(Shape{2, 3});
  Tensor b(Shape{4, 2});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("matmul: batched and broadcast gradients vs FD") {
  Rng rng(13);
  for (int trial = 0; trial < 3; ++trial) {
    Tensor a = randn({2, 3, 2, 4}, rng, 0.5);
    Tensor b = randn({4, 3}, rng, 0.5);  // broadcast over [2,3] batch
    Tensor w = rand_weights({2, 3, 2, 3}, 17 + trial);
    auto f = [&](const std::vector<Tensor>& in) {
      return sum(mul(matmul(in[0], in[1]), w));
    };
    CHECK(grad_check(f, {a, b}).worst < 1e-4);
  }
}

// ---------------------------- softmax ----------------------------

TEST_CASE("softmax: symmetric input gives uniform") {
  Tensor x(Shape{3}, 0.0);
  Tensor y = softmax(x, -1);
  for (int i = 0; i < 3; ++i) CHECK(y.data()[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("softmax: huge logits survive max subtraction") {
  Tensor x = Tensor::from_data({2}, {1000.0, 0.0});
  Tensor y = softmax(x, 0);
  CHECK(std::isfinite(y.data()[0]));
  CHECK(y.data()[0] == doctest::Approx(1.0));
  CHECK(y.data()[1] == doctest::Approx(0.0));
}

TEST_CASE("softmax: rows sum to one and are nonnegative") {
  Rng rng(5);
  Tensor x = randn({4, 7, 5}, rng, 3.0);
  Tensor y = softmax(x, -1);
  for (std::size_t r = 0; r < 28; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) {
      const double v = y.data()[r * 5 + j];
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-6);
  }
}

TEST_CASE("softmax: jacobian matches finite differences") {
  Rng rng(23);
  for (int axis : {-1, 0, 1}) {
    Tensor x = randn({5, 4}, rng);
    Tensor w = rand_weights({5, 4}, 99 + axis);
    auto f = [&](const std::vector<Tensor>& in) {
      return sum(mul(softmax(in[0], axis), w));
    };
    CHECK(grad_check(f, {x}).worst < 1e-5);
  }
}

// ---------------------------- layer_norm ----------------------------

TEST_CASE("layer_norm: constant row maps to beta via eps guard") {
  Tensor x(Shape{3}, 1.0);
  Tensor gamma(Shape{3}, 1.0);
  Tensor beta(Shape{3}, 0.0);
  Tensor y = layer_norm(x, gamma, beta);
  for (int i = 0; i < 3; ++i) CHECK(y.data()[i] == 0.0);

  // d = 1 degenerates to beta exactly
  Tensor x1(Shape{2, 1}, 5.0);
  Tensor g1(Shape{1}, 1.0);
  Tensor b1 = Tensor::from_data({1}, {0.25});
  Tensor y1 = layer_norm(x1, g1, b1);
  CHECK(y1.data()[0] == 0.25);
  CHECK(y1.data()[1] == 0.25);
}

TEST_CASE("layer_norm: symmetric pair maps to -1, 1") {
  Tensor x = Tensor::from_data({2}, {0.0, 2.0});
  Tensor gamma(Shape{2}, 1.0);
  Tensor beta(Shape{2}, 0.0);
  Tensor y = layer_norm(x, gamma, beta);
  CHECK(std::abs(y.data()[0] + 1.0) < 1e-4);
  CHECK(std::abs(y.data()[1] - 1.0) < 1e-4);
}

TEST_CASE("layer_norm: normalized rows have mean 0 and variance 1") {
  Rng rng(31);
  Tensor x = randn({6, 16}, rng, 2.0);
  Tensor gamma(Shape{16}, 1.0);
  Tensor beta(Shape{16}, 0.0);
  Tensor y = layer_norm(x, gamma, beta);
  for (std::size_t r = 0; r < 6; ++r) {
    double mu = 0, var = 0;
    for (std::size_t j = 0; j < 16; ++j) mu += y.data()[r * 16 + j];
    mu /= 16;
    for (std::size_t j = 0; j < 16; ++j) {
      const double c = y.data()[r * 16 + j] - mu;
      var += c * c;
    }
    var /= 16;
    CHECK(std::abs(mu) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("layer_norm: gradients vs finite differences") {
  Rng rng(37);
  Tensor x = randn({4, 8}, rng);
  Tensor gamma = uniform({8}, rng, 0.5, 1.5);
  Tensor beta = randn({8}, rng, 0.1);
  Tensor w = rand_weights({4, 8}, 101);
  auto f = [&](const std::vector<Tensor>& in) {
    return sum(mul(layer_norm(in[0], in[1], in[2]), w));
  };
  CHECK(grad_check(f, {x, gamma, beta}).worst < 1e-4);
}

// ---------------------------- conv2d ----------------------------

TEST_CASE("conv2d: delta kernel is the identity") {
  Rng rng(41);
  Tensor x = randn({1, 1, 5, 5}, rng);
  Tensor w(Shape{1, 1, 3, 3}, 0.0);
  w.data()[4] = 1.0;  // center tap
  Tensor b(Shape{1}, 0.0);
  Tensor y = conv2d(x, w, b, 1, 1);
  CHECK(y.shape() == x.shape());
  CHECK(oracle::max_abs_diff(y, x) == 0.0);
}

TEST_CASE("conv2d: ones kernel on ones image counts the window") {
  Tensor x(Shape{1, 1, 5, 5}, 1.0);
  Tensor w(Shape{1, 1, 3, 3}, 1.0);
  Tensor b(Shape{1}, 0.0);
  Tensor y = conv2d(x, w, b, 1, 1);
  CHECK(y.data()[0] == 4.0);                 // corner
  CHECK(y.data()[2 * 5 + 2] == 9.0);         // interior
  CHECK(y.data()[4] == 4.0);                 // corner
  CHECK(y.data()[1] == 6.0);                 // edge
}

TEST_CASE("conv2d: matches 6-loop oracle, gradients match FD") {
  Rng rng(43);
  Tensor x = randn({1, 2, 6, 6}, rng, 0.7);
  Tensor w = randn({3, 2, 3, 3}, rng, 0.4);
  Tensor b = randn({3}, rng, 0.2);
  for (std::size_t stride : {std::size_t{1}, std::size_t{2}}) {
    Tensor ours = conv2d(x, w, b, stride, 1);
    Tensor ref = oracle::conv2d_loops(x, w, b, stride, 1);
    CHECK(ours.shape() == ref.shape());
    CHECK(oracle::max_abs_diff(ours, ref) < 1e-10);
    Tensor wt = rand_weights(ours.shape(), 300 + stride);
    auto f = [&](const std::vector<Tensor>& in) {
      return sum(mul(conv2d(in[0], in[1], in[2], stride, 1), wt));
    };
    CHECK(grad_check(f, {x, w, b}).worst < 1e-4);
  }
}

TEST_CASE("conv2d: geometry validation") {
  Tensor x(Shape{1, 1, 4, 4});
  Tensor weven(Shape{1, 1, 2, 2});
  Tensor b(Shape{1});
  CHECK_THROWS_AS(conv2d(x, weven, b, 1, 1), ShapeError);
  Tensor w(Shape{1, 1, 3, 3});
  CHECK_THROWS_AS(conv2d(x, w, b, 3, 1), ShapeError);
  Tensor wbad(Shape{1, 2, 3, 3});
  CHECK_THROWS_AS(conv2d(x, wbad, b, 1, 1), ShapeError);
}

// ---------------------------- dft2_real ----------------------------

TEST_CASE("dft2_real: impulse at the origin spreads to all ones") {
  Tensor x(Shape{1, 4, 3}, 0.0);
  x.data()[0] = 1.0;
  Tensor y = dft2_real(x);
  for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.data()[i] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("dft2_real: constant input concentrates in the DC bin") {
  const double c = 0.75;
  Tensor x(Shape{1, 4, 2}, c);
  Tensor y = dft2_real(x);
  CHECK(y.data()[0] == doctest::Approx(8 * c).epsilon(1e-12));
  for (std::size_t i = 1; i < y.size(); ++i) CHECK(std::abs(y.data()[i]) < 1e-10);
}

TEST_CASE("dft2_real: matches naive complex DFT oracle") {
  Rng rng(47);
  Tensor x = randn({2, 5, 3}, rng);
  Tensor ours = dft2_real(x);
  Tensor ref = oracle::dft2_real_naive(x);
  CHECK(oracle::max_abs_diff(ours, ref) < 1e-10);
}

TEST_CASE("dft2_real: linear in its input") {
  Rng rng(53);
  Tensor x = randn({1, 6, 4}, rng);
  Tensor y = randn({1, 6, 4}, rng);
  Tensor lhs = add(dft2_real(x), dft2_real(y));
  Tensor rhs = dft2_real(add(x, y));
  CHECK(oracle::max_abs_diff(lhs, rhs) < 1e-12);
}

TEST_CASE("dft2_real: backward is the transpose map (FD check)") {
  Rng rng(59);
  Tensor x = randn({2, 4, 3}, rng);
  Tensor w = rand_weights({2, 4, 3}, 404);
  auto f = [&](const std::vector<Tensor>& in) { return sum(mul(dft2_real(in[0]), w)); };
  CHECK(grad_check(f, {x}).worst < 1e-4);
}

// ---------------------------- elementwise & shape suite ----------------------------

TEST_CASE("relu basics") {
  Tensor x = Tensor::from_data({3}, {-1, 0, 2});
  Tensor y = relu(x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == 0.0);
  CHECK(y.data()[2] == 2.0);
}

TEST_CASE("reshape keeps row-major order and requires equal counts") {
  Tensor x = arange(12);
  Tensor y = reshape(x, {2, 6});
  Tensor z = reshape(y, {3, 4});
  for (std::size_t i = 0; i < 12; ++i) CHECK(z.data()[i] == static_cast<double>(i));
  CHECK_THROWS_AS(reshape(x, {5, 2}), ShapeError);
}

TEST_CASE("gelu gradient at pinned points matches FD") {
  Tensor x = Tensor::from_data({5}, {-2.0, -0.5, 0.0, 0.5, 2.0});
  auto f = [](const std::vector<Tensor>& in) { return sum(gelu(in[0])); };
  CHECK(grad_check(f, {x}).worst < 1e-5);
}

TEST_CASE("elementwise broadcast ops: gradients vs FD on random shapes") {
  Rng rng(61);
  struct Case {
    Shape a, b;
  };
  const Case cases[] = {
      {{4, 3}, {4, 3}},
      {{2, 5, 3}, {3}},
      {{2, 1, 3}, {4, 1}},
  };
  int seed = 700;
  for (const auto& c : cases) {
    Tensor a = randn(Shape(c.a), rng, 0.8);
    Tensor b = randn_away_from_zero(Shape(c.b), rng, 0.5);  // keep div well-posed
    Shape os;
    {
      Tensor probe = add(a, b);
      os = probe.shape();
    }
    Tensor w = rand_weights(os, seed++);
    auto mk = [&](Tensor (*op)(const Tensor&, const Tensor&)) {
      return [op, &w](const std::vector<Tensor>& in) {
        return sum(mul(op(in[0], in[1]), w));
      };
    };
    CHECK(grad_check(mk(&add), {a, b}).worst < 1e-4);
    CHECK(grad_check(mk(&sub), {a, b}).worst < 1e-4);
    CHECK(grad_check(mk(&mul), {a, b}).worst < 1e-4);
    CHECK(grad_check(mk(&div), {a, b}).worst < 1e-4);
  }
}

TEST_CASE("unary/shape/reduction ops: gradients vs FD") {
  Rng rng(67);
  for (int trial = 0; trial < 3; ++trial) {
    Tensor x = randn_away_from_zero({3, 4, 2}, rng, 0.3);
    Tensor w1 = rand_weights({3, 4, 2}, 800 + trial);
    CHECK(check1([&](const Tensor& t) { return sum(mul(relu(t), w1)); }, x) < 1e-4);
    CHECK(check1([&](const Tensor& t) { return sum(mul(gelu(t), w1)); }, x) < 1e-4);
    CHECK(check1([&](const Tensor& t) { return sum(mul(scale(t, -1.7), w1)); }, x) < 1e-4);
    CHECK(check1([&](const Tensor& t) { return sum(mul(add_scalar(t, 2.5), w1)); }, x) < 1e-4);
    CHECK(check1([&](const Tensor& t) { return sum(mul(neg(t), w1)); }, x) < 1e-4);

    Tensor w2 = rand_weights({2, 4, 3}, 810 + trial);
    CHECK(check1([&](const Tensor& t) { return sum(mul(permute(t, {2, 1, 0}), w2)); }, x) < 1e-4);
    Tensor w3 = rand_weights({3, 2, 4}, 820 + trial);
    CHECK(check1([&](const Tensor& t) { return sum(mul(transpose(t), w3)); }, x) < 1e-4);
    Tensor w4 = rand_weights({24}, 830 + trial);
    CHECK(check1([&](const Tensor& t) { return sum(mul(reshape(t, {24}), w4)); }, x) < 1e-4);
    Tensor w5 = rand_weights({3, 2, 2}, 840 + trial);
    CHECK(check1([&](const Tensor& t) { return sum(mul(slice(t, 1, 1, 3), w5)); }, x) < 1e-4);
    CHECK(check1([&](const Tensor& t) { return mean(t); }, x) < 1e-4);
    Tensor w6 = rand_weights({3, 2}, 850 + trial);
    CHECK(check1([&](const Tensor& t) { return sum(mul(sum_axis(t, 1), w6)); }, x) < 1e-4);
    CHECK(check1([&](const Tensor& t) { return sum(mul(mean_axis(t, 1), w6)); }, x) < 1e-4);
  }

  // concat and expand
  Tensor a = randn({2, 3}, rng);
  Tensor b = randn({4, 3}, rng);
  Tensor wc = rand_weights({6, 3}, 860);
  auto fc = [&](const std::vector<Tensor>& in) {
    return sum(mul(concat({in[0], in[1]}, 0), wc));
  };
  CHECK(grad_check(fc, {a, b}).worst < 1e-4);

  Tensor v = randn({3}, rng);
  Tensor we = rand_weights({4, 2, 3}, 870);
  CHECK(check1([&](const Tensor& t) { return sum(mul(expand(t, {4, 2, 3}), we)); }, v) < 1e-4);
}

TEST_CASE("segment_mean: remainder goes to the last segment, FD agrees") {
  Rng rng(71);
  Tensor x = randn({1, 2, 7, 3}, rng);
  Tensor y = segment_mean(x, 3);  // segments of 2,2,3
  CHECK(y.shape() == Shape{1, 2, 3, 3});
  // check the last segment mean by hand on head 0
  for (std::size_t j = 0; j < 3; ++j) {
    const double want =
        (x.data()[4 * 3 + j] + x.data()[5 * 3 + j] + x.data()[6 * 3 + j]) / 3.0;
    CHECK(y.data()[2 * 3 + j] == doctest::Approx(want).epsilon(1e-12));
  }
  Tensor w = rand_weights({1, 2, 3, 3}, 880);
  CHECK(check1([&](const Tensor& t) { return sum(mul(segment_mean(t, 3), w)); }, x) < 1e-4);
  CHECK_THROWS_AS(segment_mean(x, 9), ConfigError);
}

TEST_CASE("rope: position zero is identity, norms preserved") {
  Rng rng(73);
  Tensor x = randn({1, 2, 5, 8}, rng);
  Tensor y = rope(x, 10000.0);
  for (std::size_t j = 0; j < 8; ++j) {
    CHECK(y.data()[j] == doctest::Approx(x.data()[j]).epsilon(1e-15));
  }
  for (std::size_t r = 0; r < 2 * 5; ++r) {
    double nx = 0, ny = 0;
    for (std::size_t j = 0; j < 8; ++j) {
      nx += x.data()[r * 8 + j] * x.data()[r * 8 + j];
      ny += y.data()[r * 8 + j] * y.data()[r * 8 + j];
    }
    CHECK(std::abs(std::sqrt(nx) - std::sqrt(ny)) < 1e-12);
  }
  CHECK_THROWS_AS(rope(randn({1, 1, 2, 3}, rng), 10000.0), ConfigError);
}

TEST_CASE("rope: inner products depend only on the relative offset") {
  Rng rng(79);
  const std::size_t dh = 8, len = 12;
  Tensor qrow = randn({dh}, rng);
  Tensor krow = randn({dh}, rng);
  Tensor qfull(Shape{1, 1, len, dh});
  Tensor kfull(Shape{1, 1, len, dh});
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t j = 0; j < dh; ++j) {
      qfull.data()[t * dh + j] = qrow.data()[j];
      kfull.data()[t * dh + j] = krow.data()[j];
    }
  Tensor rq = rope(qfull, 10000.0);
  Tensor rk = rope(kfull, 10000.0);
  auto dot_rows = [&](const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
    double acc = 0;
    for (std::size_t c = 0; c < dh; ++c) acc += a.data()[i * dh + c] * b.data()[j * dh + c];
    return acc;
  };
  const std::size_t pairs[][2] = {{3, 1}, {7, 5}, {10, 8}};
  for (const auto& p : pairs) {
    const double lhs = dot_rows(rq, p[0], rk, p[1]);
    const double rhs = dot_rows(rq, p[0] - p[1], kfull, 0);
    CHECK(std::abs(lhs - rhs) < 1e-10);
  }
}

TEST_CASE("rope: gradient vs FD") {
  Rng rng(83);
  Tensor x = randn({2, 2, 4, 6}, rng);
  Tensor w = rand_weights({2, 2, 4, 6}, 890);
  CHECK(check1([&](const Tensor& t) { return sum(mul(rope(t, 100.0), w)); }, x) < 1e-4);
}

TEST_CASE("dropout: p=0 is a true no-op; fixed mask differentiates") {
  Rng rng(89);
  Tensor x = randn({4, 4}, rng);
  Rng drng(1);
  Tensor y = dropout(x, 0.0, drng);
  CHECK(y.storage_key() == x.storage_key());

  Tensor w = rand_weights({4, 4}, 900);
  auto f = [&](const std::vector<Tensor>& in) {
    Rng fixed(77);
    return sum(mul(dropout(in[0], 0.3, fixed), w));
  };
  CHECK(grad_check(f, {x}).worst < 1e-4);
}

TEST_CASE("cross_entropy: uniform logits give exactly ln(C)") {
  Tensor logits(Shape{4, 10}, 0.37);
  Tensor loss = cross_entropy(logits, {0, 3, 5, 9});
  CHECK(loss.item() == doctest::Approx(std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("cross_entropy: gradient vs FD and label validation") {
  Rng rng(97);
  Tensor logits = randn({3, 5}, rng);
  const std::vector<int> labels = {1, 4, 0};
  auto f = [&](const std::vector<Tensor>& in) { return cross_entropy(in[0], labels); };
  CHECK(grad_check(f, {logits}).worst < 1e-4);
  CHECK_THROWS_AS(cross_entropy(logits, {1, 2}), ContractError);
  CHECK_THROWS_AS(cross_entropy(logits, {1, 2, 5}), ContractError);
}

TEST_CASE("two-layer MLP: every parameter gradient matches FD") {
  Rng rng(101);
  Tensor x = randn({4, 6}, rng);
  Tensor w1 = randn({6, 8}, rng, 0.5);
  Tensor b1 = randn({8}, rng, 0.1);
  Tensor w2 = randn({8, 3}, rng, 0.5);
  Tensor b2 = randn({3}, rng, 0.1);
  const std::vector<int> labels = {0, 2, 1, 0};
  auto f = [&](const std::vector<Tensor>& in) {
    Tensor h = gelu(linear(x, in[0], in[1]));
    Tensor logits = linear(h, in[2], in[3]);
    return cross_entropy(logits, labels);
  };
  auto report = grad_check(f, {w1, b1, w2, b2}, 1e-5, {"w1", "b1", "w2", "b2"});
  CHECK(report.worst < 1e-4);
  CHECK(report.inputs.size() == 4);
}

// ---------------------------- grad_check itself ----------------------------

TEST_CASE("grad_check: linear function is exact") {
  Rng rng(103);
  Tensor x = randn({5}, rng);
  auto f = [](const std::vector<Tensor>& in) { return sum(in[0]); };
  CHECK(grad_check(f, {x}).worst < 1e-10);
}

TEST_CASE("grad_check: softmax-then-pick is tight") {
  Rng rng(107);
  Tensor x = randn({5}, rng);
  auto f = [](const std::vector<Tensor>& in) {
    return sum(slice(softmax(in[0], 0), 0, 2, 3));
  };
  CHECK(grad_check(f, {x}).worst < 1e-6);
}

TEST_CASE("grad_check: rejects non-scalar f and detects a wrong backward") {
  Rng rng(109);
  Tensor x = randn({3}, rng);
  auto bad_shape = [](const std::vector<Tensor>& in) { return scale(in[0], 2.0); };
  CHECK_THROWS_AS(grad_check(bad_shape, {x}), ContractError);

  // An op with a deliberately wrong gradient (claims d/dx 3x = 2).
  auto wrong = [](const std::vector<Tensor>& in) {
    const Tensor& t = in[0];
    Tensor out(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) out.data()[i] = 3.0 * t.data()[i];
    if (Tape* tape = Tape::active(); tape && tape->tracks(t)) {
      tape->record("wrong_scale", {&t}, out, [](const Tensor& g) {
        Tensor dx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) dx.data()[i] = 2.0 * g.data()[i];
        return std::vector<Tensor>{dx};
      });
    }
    return sum(out);
  };
  CHECK(grad_check(wrong, {x}).worst > 1e-2);
}
