#pragma once

#include <utility>
#include <vector>

#include "vx/tensor.hpp"

namespace vx {

enum class EmbeddingKind { LinearPatch, ConvStem };
enum class PositionKind { Learnable1D, Rope, None };

const char* embedding_kind_name(EmbeddingKind k);
EmbeddingKind embedding_kind_from(const std::string& s);
const char* position_kind_name(PositionKind k);
PositionKind position_kind_from(const std::string& s);

struct EmbeddingConfig {
  EmbeddingKind kind = EmbeddingKind::LinearPatch;
  std::size_t patch_size = 1;
  std::vector<std::size_t> stem_channels = {32, 64, 128};  // 3x3 kernels
  std::size_t stem_stride_first = 1;
  std::size_t model_dim = 128;

  void validate() const;
  // Token count produced from an H x W image; ShapeError when the geometry
  // does not divide.
  std::size_t tokens_for(std::size_t h, std::size_t w) const;
};

struct PositionConfig {
  PositionKind kind = PositionKind::Learnable1D;
  std::size_t max_len = 0;
  double rope_base = 10000.0;
};

struct ConvStemParams {
  std::vector<Tensor> w;  // [c_out, c_in, 3, 3] per stage
  std::vector<Tensor> b;  // [c_out]
};

// [B,C,H,W] -> [B,(H/p)(W/p),C*p*p]; patches in row-major image order,
// channel-major then row-major inside each patch.
Tensor patchify(const Tensor& img, std::size_t p);
// Exact inverse of patchify for the given image geometry.
Tensor unpatchify(const Tensor& tokens, std::size_t p, std::size_t channels,
                  std::size_t h, std::size_t w);

Tensor linear_patch_embed(const Tensor& tokens, const Tensor& w, const Tensor& b);

// Stacked 3x3 convolutions (first at cfg.stem_stride_first, rest stride 1,
// same padding) with ReLU between stages, none after the last; feature maps
// flatten to tokens in the same row-major order as patchify.
Tensor conv_stem(const Tensor& img, const ConvStemParams& p, const EmbeddingConfig& cfg);

// Output position 0 is cls broadcast over the batch.
Tensor prepend_class_token(const Tensor& x, const Tensor& cls);

// x + table[0..n]; ShapeError when n exceeds the table.
Tensor add_learnable_pos(const Tensor& x, const Tensor& table);

// Rotary map on projected q,k [B,H,n,dh]; parameter-free.
std::pair<Tensor, Tensor> apply_rope(const Tensor& q, const Tensor& k, double base);

}  // namespace vx
