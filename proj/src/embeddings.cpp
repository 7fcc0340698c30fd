#include "vx/embeddings.hpp"

#include <string>

#include "vx/ops.hpp"

namespace vx {

const char* embedding_kind_name(EmbeddingKind k) {
  return k == EmbeddingKind::LinearPatch ? "linear_patch" : "conv_stem";
}

EmbeddingKind embedding_kind_from(const std::string& s) {
  if (s == "linear_patch") return EmbeddingKind::LinearPatch;
  if (s == "conv_stem") return EmbeddingKind::ConvStem;
  throw ConfigError("unknown embedding kind '" + s + "'");
}

const char* position_kind_name(PositionKind k) {
  switch (k) {
    case PositionKind::Learnable1D: return "learnable";
    case PositionKind::Rope: return "rope";
    case PositionKind::None: return "none";
  }
  return "?";
}

PositionKind position_kind_from(const std::string& s) {
  if (s == "learnable") return PositionKind::Learnable1D;
  if (s == "rope") return PositionKind::Rope;
  if (s == "none") return PositionKind::None;
  throw ConfigError("unknown position kind '" + s + "'");
}

void EmbeddingConfig::validate() const {
  if (model_dim == 0) throw ConfigError("embedding: model_dim must be positive");
  if (kind == EmbeddingKind::LinearPatch) {
    if (patch_size == 0) throw ConfigError("embedding: patch_size must be positive");
  } else {
    if (stem_channels.empty()) throw ConfigError("embedding: stem_channels empty");
    if (stem_channels.back() != model_dim) {
      throw ConfigError("embedding: last stem channel count " +
                        std::to_string(stem_channels.back()) +
                        " must equal model_dim " + std::to_string(model_dim));
    }
    if (stem_stride_first != 1 && stem_stride_first != 2) {
      throw ConfigError("embedding: stem_stride_first must be 1 or 2");
    }
  }
}

std::size_t EmbeddingConfig::tokens_for(std::size_t h, std::size_t w) const {
  if (kind == EmbeddingKind::LinearPatch) {
    if (h % patch_size != 0 || w % patch_size != 0) {
      throw ShapeError("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                       " not divisible by patch size " + std::to_string(patch_size));
    }
    return (h / patch_size) * (w / patch_size);
  }
  if (h % stem_stride_first != 0 || w % stem_stride_first != 0) {
    throw ShapeError("conv_stem: image " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by first stride " + std::to_string(stem_stride_first));
  }
  return (h / stem_stride_first) * (w / stem_stride_first);
}

Tensor patchify(const Tensor& img, std::size_t p) {
  if (img.rank() != 4) {
    throw ShapeError("patchify: image must be [B,C,H,W], got " + shape_str(img.shape()));
  }
  const std::size_t B = img.shape()[0], C = img.shape()[1], H = img.shape()[2],
                    W = img.shape()[3];
  if (p == 0 || H % p != 0 || W % p != 0) {
    throw ShapeError("patchify: image " + std::to_string(H) + "x" + std::to_string(W) +
                     " not divisible by patch size " + std::to_string(p));
  }
  const std::size_t nh = H / p, nw = W / p;
  Tensor out(Shape{B, nh * nw, C * p * p});
  const double* src = img.data();
  double* dst = out.data();
  const std::size_t tok_dim = C * p * p;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t py = 0; py < nh; ++py)
      for (std::size_t px = 0; px < nw; ++px) {
        double* row = dst + (b * nh * nw + py * nw + px) * tok_dim;
        std::size_t idx = 0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t iy = 0; iy < p; ++iy)
            for (std::size_t ix = 0; ix < p; ++ix, ++idx) {
              row[idx] = src[((b * C + c) * H + py * p + iy) * W + px * p + ix];
            }
      }
  }
  Tape* tape = Tape::active();
  if (tape && tape->tracks(img)) {
    Shape is = img.shape();
    tape->record("patchify", {&img}, out, [is, p](const Tensor& g) -> std::vector<Tensor> {
      return {unpatchify(g, p, is[1], is[2], is[3])};
    });
  }
  return out;
}

Tensor unpatchify(const Tensor& tokens, std::size_t p, std::size_t channels,
                  std::size_t h, std::size_t w) {
  const std::size_t nh = h / p, nw = w / p;
  if (tokens.rank() != 3 || tokens.shape()[1] != nh * nw ||
      tokens.shape()[2] != channels * p * p) {
    throw ShapeError("unpatchify: tokens " + shape_str(tokens.shape()) +
                     " do not match image geometry");
  }
  const std::size_t B = tokens.shape()[0];
  Tensor out(Shape{B, channels, h, w});
  const double* src = tokens.data();
  double* dst = out.data();
  const std::size_t tok_dim = channels * p * p;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t py = 0; py < nh; ++py)
      for (std::size_t px = 0; px < nw; ++px) {
        const double* row = src + (b * nh * nw + py * nw + px) * tok_dim;
        std::size_t idx = 0;
        for (std::size_t c = 0; c < channels; ++c)
          for (std::size_t iy = 0; iy < p; ++iy)
            for (std::size_t ix = 0; ix < p; ++ix, ++idx) {
              dst[((b * channels + c) * h + py * p + iy) * w + px * p + ix] = row[idx];
            }
      }
  }
  Tape* tape = Tape::active();
  if (tape && tape->tracks(tokens)) {
    tape->record("unpatchify", {&tokens}, out,
                 [p](const Tensor& g) -> std::vector<Tensor> { return {patchify(g, p)}; });
  }
  return out;
}

Tensor linear_patch_embed(const Tensor& tokens, const Tensor& w, const Tensor& b) {
  if (tokens.rank() != 3 || tokens.shape()[2] != w.shape()[0]) {
    throw ShapeError("linear_patch_embed: tokens " + shape_str(tokens.shape()) +
                     " incompatible with weight " + shape_str(w.shape()));
  }
  return linear(tokens, w, b);
}

Tensor conv_stem(const Tensor& img, const ConvStemParams& p, const EmbeddingConfig& cfg) {
  cfg.validate();
  if (img.rank() != 4) {
    throw ShapeError("conv_stem: image must be [B,C,H,W], got " + shape_str(img.shape()));
  }
  cfg.tokens_for(img.shape()[2], img.shape()[3]);  // stride divisibility check
  if (p.w.size() != cfg.stem_channels.size() || p.b.size() != p.w.size()) {
    throw ShapeError("conv_stem: expected " + std::to_string(cfg.stem_channels.size()) +
                     " conv stages, got " + std::to_string(p.w.size()));
  }
  Tensor h = img;
  for (std::size_t s = 0; s < p.w.size(); ++s) {
    h = conv2d(h, p.w[s], p.b[s], s == 0 ? cfg.stem_stride_first : 1, 1);
    if (s + 1 < p.w.size()) h = relu(h);
  }
  const std::size_t B = h.shape()[0], d = h.shape()[1];
  const std::size_t hw = h.shape()[2] * h.shape()[3];
  return transpose(reshape(h, {B, d, hw}));
}

Tensor prepend_class_token(const Tensor& x, const Tensor& cls) {
  if (x.rank() != 3 || cls.rank() != 1 || cls.shape()[0] != x.shape()[2]) {
    throw ShapeError("prepend_class_token: x " + shape_str(x.shape()) +
                     " and cls " + shape_str(cls.shape()) + " disagree");
  }
  const std::size_t B = x.shape()[0], d = x.shape()[2];
  Tensor row = expand(reshape(cls, {1, 1, d}), {B, 1, d});
  return concat({row, x}, 1);
}

Tensor add_learnable_pos(const Tensor& x, const Tensor& table) {
  if (x.rank() != 3 || table.rank() != 2 || table.shape()[1] != x.shape()[2]) {
    throw ShapeError("add_learnable_pos: x " + shape_str(x.shape()) +
                     " and table " + shape_str(table.shape()) + " disagree");
  }
  const std::size_t n = x.shape()[1];
  if (n > table.shape()[0]) {
    throw ShapeError("add_learnable_pos: sequence length " + std::to_string(n) +
                     " exceeds table rows " + std::to_string(table.shape()[0]));
  }
  Tensor rows = n == table.shape()[0] ? table : slice(table, 0, 0, n);
  return add(x, rows);
}

std::pair<Tensor, Tensor> apply_rope(const Tensor& q, const Tensor& k, double base) {
  return {rope(q, base), rope(k, base)};
}

}  // namespace vx
