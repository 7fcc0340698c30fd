#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "support/oracles.hpp"
#include "vx/embeddings.hpp"
#include "vx/gradcheck.hpp"
#include "vx/ops.hpp"

using namespace vx;

TEST_CASE("patchify: pixel tokens for p=1, patch tokens for p=2") {
  Rng rng(3);
  Tensor img32 = randn({1, 3, 32, 32}, rng);
  Tensor t1 = patchify(img32, 1);
  CHECK(t1.shape() == Shape{1, 1024, 3});

  Tensor img64 = randn({1, 3, 64, 64}, rng);
  Tensor t2 = patchify(img64, 2);
  CHECK(t2.shape() == Shape{1, 1024, 12});

  CHECK_THROWS_AS(patchify(randn({1, 3, 5, 4}, rng), 2), ShapeError);
}

TEST_CASE("patchify: row-major token order, channel-major within a patch") {
  Tensor img = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor t = patchify(img, 1);
  CHECK(t.shape() == Shape{1, 4, 1});
  for (int i = 0; i < 4; ++i) CHECK(t.data()[i] == i + 1.0);

  // 2 channels, one 2x2 patch: channel 0 pixels first, then channel 1
  Tensor img2 = Tensor::from_data({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
  Tensor t2 = patchify(img2, 2);
  CHECK(t2.shape() == Shape{1, 1, 8});
  const double want[8] = {1, 2, 3, 4, 10, 20, 30, 40};
  for (int i = 0; i < 8; ++i) CHECK(t2.data()[i] == want[i]);
}

TEST_CASE("unpatchify inverts patchify exactly") {
  Rng rng(5);
  for (std::size_t p : {std::size_t{1}, std::size_t{2}, std::size_t{4}}) {
    Tensor img = randn({2, 3, 8, 8}, rng);
    Tensor back = unpatchify(patchify(img, p), p, 3, 8, 8);
    CHECK(oracle::max_abs_diff(back, img) == 0.0);
  }
}

TEST_CASE("patchify gradients vs FD") {
  Rng rng(7);
  Tensor img = randn({1, 2, 4, 4}, rng);
  Tensor w = uniform({1, 4, 8}, rng, 0.5, 1.5);
  auto f = [&](const std::vector<Tensor>& in) {
    return sum(mul(patchify(in[0], 2), w));
  };
  CHECK(grad_check(f, {img}).worst < 1e-4);
}

TEST_CASE("linear patch embed: zero weight maps every token to the bias") {
  Rng rng(11);
  Tensor tokens = randn({2, 5, 3}, rng);
  Tensor w(Shape{3, 4}, 0.0);
  Tensor beta = randn({4}, rng);
  Tensor out = linear_patch_embed(tokens, w, beta);
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(out.data()[r * 4 + j] == beta.data()[j]);
    }
  CHECK_THROWS_AS(linear_patch_embed(tokens, Tensor(Shape{5, 4}), beta), ShapeError);

  Tensor wr = randn({3, 4}, rng, 0.5);
  auto f = [&](const std::vector<Tensor>& in) {
    return sum(linear_patch_embed(in[0], in[1], in[2]));
  };
  CHECK(grad_check(f, {tokens, wr, beta}).worst < 1e-4);
}

namespace {
ConvStemParams stem_params(const EmbeddingConfig& cfg, std::size_t in_ch, Rng& rng) {
  ConvStemParams p;
  std::size_t prev = in_ch;
  for (std::size_t c : cfg.stem_channels) {
    p.w.push_back(trunc_normal({c, prev, 3, 3}, rng, 0.1));
    p.b.push_back(Tensor(Shape{c}, 0.0));
    prev = c;
  }
  return p;
}
}  // namespace

TEST_CASE("conv stem: geometry at stride 1 and stride 2") {
  Rng rng(13);
  EmbeddingConfig cfg;
  cfg.kind = EmbeddingKind::ConvStem;
  cfg.stem_channels = {32, 64, 128};
  cfg.model_dim = 128;

  cfg.stem_stride_first = 1;
  ConvStemParams p1 = stem_params(cfg, 3, rng);
  Tensor img = randn({1, 3, 32, 32}, rng);
  Tensor tok = conv_stem(img, p1, cfg);
  CHECK(tok.shape() == Shape{1, 1024, 128});

  cfg.stem_stride_first = 2;
  Tensor img64 = randn({1, 3, 64, 64}, rng);
  Tensor tok2 = conv_stem(img64, p1, cfg);
  CHECK(tok2.shape() == Shape{1, 1024, 128});

  CHECK_THROWS_AS(conv_stem(randn({1, 3, 7, 8}, rng), p1, cfg), ShapeError);

  EmbeddingConfig bad = cfg;
  bad.stem_channels = {32, 64, 64};
  CHECK_THROWS_AS(conv_stem(img, p1, bad), ConfigError);
}

TEST_CASE("conv stem: token order matches patchify order, gradients pass") {
  Rng rng(17);
  EmbeddingConfig cfg;
  cfg.kind = EmbeddingKind::ConvStem;
  cfg.stem_channels = {4, 6};
  cfg.model_dim = 6;
  cfg.stem_stride_first = 1;
  ConvStemParams p = stem_params(cfg, 2, rng);
  Tensor img = randn({1, 2, 4, 4}, rng);
  Tensor tok = conv_stem(img, p, cfg);
  CHECK(tok.shape() == Shape{1, 16, 6});

  // token (y,x) must hold feature-map column [:, y, x]
  Tensor h = relu(conv2d(img, p.w[0], p.b[0], 1, 1));
  h = conv2d(h, p.w[1], p.b[1], 1, 1);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t c = 0; c < 6; ++c) {
        CHECK(tok.data()[(y * 4 + x) * 6 + c] ==
              doctest::Approx(h.data()[(c * 4 + y) * 4 + x]).epsilon(1e-15));
      }

  Tensor wsum = uniform({1, 16, 6}, rng, 0.5, 1.5);
  for (Tensor& t : p.w) t.set_requires_grad(true);
  for (Tensor& t : p.b) t.set_requires_grad(true);
  auto f = [&](const std::vector<Tensor>& in) {
    return sum(mul(conv_stem(in[0], p, cfg), wsum));
  };
  std::vector<Tensor> inputs = {img, p.w[0], p.b[0], p.w[1], p.b[1]};
  CHECK(grad_check(f, inputs).worst < 1e-4);
}

TEST_CASE("class token: prepends, zero token gives zero row, gradient is B*ones") {
  Rng rng(19);
  Tensor x = randn({3, 5, 4}, rng);
  Tensor cls(Shape{4}, 0.0);
  Tensor out = prepend_class_token(x, cls);
  CHECK(out.shape() == Shape{3, 6, 4});
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(out.data()[b * 6 * 4 + j] == 0.0);
      CHECK(out.data()[b * 6 * 4 + 4 + j] == x.data()[b * 5 * 4 + j]);
    }

  cls.set_requires_grad(true);
  Tape tape;
  Tensor loss = sum(prepend_class_token(x, cls));
  tape.backward(loss);
  const Tensor& g = tape.grad(cls);
  for (std::size_t j = 0; j < 4; ++j) CHECK(g.data()[j] == 3.0);
}

TEST_CASE("learnable positions: identity at zero, injective rows, bounds") {
  Rng rng(23);
  Tensor x(Shape{2, 3, 4}, 0.5);
  Tensor zero_table(Shape{8, 4}, 0.0);
  Tensor same = add_learnable_pos(x, zero_table);
  CHECK(oracle::max_abs_diff(same, x) == 0.0);

  Tensor table = randn({8, 4}, rng);
  Tensor out = add_learnable_pos(x, table);
  // equal content + distinct table rows -> distinct outputs
  double diff = 0;
  for (std::size_t j = 0; j < 4; ++j) {
    diff = std::max(diff, std::abs(out.data()[0 * 4 + j] - out.data()[1 * 4 + j]));
  }
  CHECK(diff > 1e-6);

  Tensor xlong(Shape{1, 9, 4}, 0.0);
  CHECK_THROWS_AS(add_learnable_pos(xlong, table), ShapeError);

  Tensor w = uniform({2, 3, 4}, rng, 0.5, 1.5);
  auto f = [&](const std::vector<Tensor>& in) {
    return sum(mul(add_learnable_pos(in[0], in[1]), w));
  };
  CHECK(grad_check(f, {x, table}).worst < 1e-4);
}

TEST_CASE("apply_rope wraps the rotary map for q and k") {
  Rng rng(29);
  Tensor q = randn({1, 2, 4, 6}, rng);
  Tensor k = randn({1, 2, 4, 6}, rng);
  auto [rq, rk] = apply_rope(q, k, 10000.0);
  CHECK(oracle::max_abs_diff(rq, rope(q, 10000.0)) == 0.0);
  CHECK(oracle::max_abs_diff(rk, rope(k, 10000.0)) == 0.0);
}
