#pragma once

#include <string>

#include "vx/tensor.hpp"

namespace vx {
class Rng;

enum class MixerKind { Exact, Performer, Linformer, Nystrom, Fourier, MlpMix };

const char* mixer_kind_name(MixerKind kind);
MixerKind mixer_kind_from(const std::string& name);  // ConfigError on unknown

struct MixerConfig {
  MixerKind kind = MixerKind::Exact;
  std::size_t heads = 4;
  std::size_t model_dim = 128;
  std::size_t landmarks = 64;       // Nystrom
  std::size_t proj_rank = 256;      // Linformer
  std::size_t pinv_iters = 6;       // Nystrom Newton-Schulz steps
  bool pinv_exact = false;          // Nystrom: exact SVD pinv (oracle path)
  std::size_t token_mlp_dim = 0;    // MlpMix token-mixing width
  std::size_t channel_mlp_dim = 0;  // MlpMix channel-mixing width
  std::size_t seq_len = 0;          // bound length: Linformer E rows / MlpMix n
  double rope_base = 0.0;           // > 0 applies the rotary map to q,k

  std::size_t head_dim() const { return model_dim / heads; }
  void validate() const;  // ConfigError listing the violated constraint
};

// Every mixer reads only the fields it owns; unused tensors stay undefined.
struct MixerParams {
  // attention family
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor linformer_e;  // [seq_len, proj_rank]; shared for K and V

  // MlpMix block
  Tensor norm_token_gamma, norm_token_beta;
  Tensor token_w1, token_b1, token_w2, token_b2;
  Tensor norm_channel_gamma, norm_channel_beta;
  Tensor channel_w1, channel_b1, channel_w2, channel_b2;
};

// Fresh parameters for a standalone mixer (tests, benchmarks); models build
// theirs through the manifest instead.
MixerParams init_mixer_params(const MixerConfig& cfg, Rng& rng);

// x is [B,n,model_dim] for all entry points; outputs match the input shape.
Tensor exact_attention(const Tensor& x, const MixerParams& p, const MixerConfig& cfg);
Tensor performer_attention(const Tensor& x, const MixerParams& p, const MixerConfig& cfg);
Tensor linformer_attention(const Tensor& x, const MixerParams& p, const MixerConfig& cfg);
Tensor nystrom_attention(const Tensor& x, const MixerParams& p, const MixerConfig& cfg);
Tensor fourier_mix(const Tensor& x);
Tensor mlp_mixer_block(const Tensor& x, const MixerParams& p, const MixerConfig& cfg);

// Single dispatch entry; routes on cfg.kind.
Tensor mix(const Tensor& x, const MixerConfig& cfg, const MixerParams& p);

// [B,n,d] -> [B,H,n,d/H] and back; used by the attention mixers.
Tensor split_heads(const Tensor& x, std::size_t heads);
Tensor merge_heads(const Tensor& x);

inline constexpr double kPerformerDenomEps = 1e-6;

}  // namespace vx
