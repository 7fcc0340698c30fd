#include "vx/mixers.hpp"

#include <cmath>

#include "vx/linalg.hpp"
#include "vx/ops.hpp"
#include "vx/rng.hpp"

namespace vx {

const char* mixer_kind_name(MixerKind kind) {
  switch (kind) {
    case MixerKind::Exact: return "exact";
    case MixerKind::Performer: return "performer";
    case MixerKind::Linformer: return "linformer";
    case MixerKind::Nystrom: return "nystrom";
    case MixerKind::Fourier: return "fourier";
    case MixerKind::MlpMix: return "mlp_mixer";
  }
  return "?";
}

MixerKind mixer_kind_from(const std::string& name) {
  if (name == "exact") return MixerKind::Exact;
  if (name == "performer") return MixerKind::Performer;
  if (name == "linformer") return MixerKind::Linformer;
  if (name == "nystrom") return MixerKind::Nystrom;
  if (name == "fourier") return MixerKind::Fourier;
  if (name == "mlp_mixer") return MixerKind::MlpMix;
  throw ConfigError("unknown mixer kind '" + name + "'");
}

void MixerConfig::validate() const {
  if (heads == 0 || model_dim == 0) {
    throw ConfigError("mixer: heads and model_dim must be positive");
  }
  if (model_dim % heads != 0) {
    throw ConfigError("mixer: model_dim " + std::to_string(model_dim) +
                      " not divisible by heads " + std::to_string(heads));
  }
  if (rope_base > 0 && head_dim() % 2 != 0) {
    throw ConfigError("mixer: rotary positions need an even head_dim, got " +
                      std::to_string(head_dim()));
  }
  switch (kind) {
    case MixerKind::Nystrom:
      if (landmarks == 0) throw ConfigError("mixer: landmarks must be positive");
      if (pinv_iters == 0) throw ConfigError("mixer: pinv_iters must be positive");
      break;
    case MixerKind::Linformer:
      if (proj_rank == 0) throw ConfigError("mixer: proj_rank must be positive");
      if (seq_len == 0) throw ConfigError("mixer: linformer needs a bound seq_len");
      break;
    case MixerKind::MlpMix:
      if (token_mlp_dim == 0) throw ConfigError("mixer: token_mlp_dim must be positive");
      if (channel_mlp_dim == 0) throw ConfigError("mixer: channel_mlp_dim must be positive");
      if (seq_len == 0) throw ConfigError("mixer: mlp_mixer needs a bound seq_len");
      break;
    default:
      break;
  }
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t B = x.shape()[0], n = x.shape()[1], d = x.shape()[2];
  Tensor y = reshape(x, {B, n, heads, d / heads});
  return permute(y, {0, 2, 1, 3});
}

Tensor merge_heads(const Tensor& x) {
  const std::size_t B = x.shape()[0], H = x.shape()[1], n = x.shape()[2],
                    dh = x.shape()[3];
  Tensor y = permute(x, {0, 2, 1, 3});
  return reshape(y, {B, n, H * dh});
}

namespace {

void check_input(const Tensor& x, const MixerConfig& cfg, const char* who) {
  cfg.validate();
  if (x.rank() != 3 || x.shape()[2] != cfg.model_dim) {
    throw ShapeError(std::string(who) + ": input must be [B,n," +
                     std::to_string(cfg.model_dim) + "], got " + shape_str(x.shape()));
  }
}

Tensor project_heads(const Tensor& x, const Tensor& w, const Tensor& b,
                     const MixerConfig& cfg, bool rotate) {
  Tensor h = split_heads(linear(x, w, b), cfg.heads);
  if (rotate && cfg.rope_base > 0) h = rope(h, cfg.rope_base);
  return h;
}

}  // namespace

Tensor exact_attention(const Tensor& x, const MixerParams& p, const MixerConfig& cfg) {
  check_input(x, cfg, "exact_attention");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
  Tensor v = project_heads(x, p.wv, p.bv, cfg, false);
  Tensor att;  // [B,H,n,n] — the quadratic yardstick, materialized on purpose
  {
    Tensor q = scale(project_heads(x, p.wq, p.bq, cfg, true), inv_sqrt);
    Tensor k = project_heads(x, p.wk, p.bk, cfg, true);
    att = matmul(q, transpose(k));
  }
  Tensor probs = softmax(att, -1);
  att = Tensor();
  Tensor ctx = matmul(probs, v);
  probs = Tensor();
  return linear(merge_heads(ctx), p.wo, p.bo);
}

Tensor performer_attention(const Tensor& x, const MixerParams& p, const MixerConfig& cfg) {
  check_input(x, cfg, "performer_attention");
  const std::size_t B = x.shape()[0];
  Tensor v = project_heads(x, p.wv, p.bv, cfg, false);
  Tensor phi_q = relu(project_heads(x, p.wq, p.bq, cfg, true));
  Tensor num, den;
  {
    Tensor phi_k = relu(project_heads(x, p.wk, p.bk, cfg, true));
    // linear association order: (phi_k^T v) is [dh,dh]; never an n x n matrix
    Tensor kv = matmul(transpose(phi_k), v);
    Tensor ksum = sum_axis(phi_k, 2);  // [B,H,dh]
    phi_k = Tensor();
    num = matmul(phi_q, kv);
    den = matmul(phi_q, reshape(ksum, {B, cfg.heads, cfg.head_dim(), 1}));
  }
  Tensor out_heads = div(num, add_scalar(den, kPerformerDenomEps));
  num = Tensor();
  den = Tensor();
  return linear(merge_heads(out_heads), p.wo, p.bo);
}

Tensor linformer_attention(const Tensor& x, const MixerParams& p, const MixerConfig& cfg) {
  check_input(x, cfg, "linformer_attention");
  const std::size_t n = x.shape()[1];
  if (n != cfg.seq_len) {
    throw ShapeError("linformer_attention: projection is bound to length " +
                     std::to_string(cfg.seq_len) + ", got n=" + std::to_string(n));
  }
  if (p.linformer_e.shape() != Shape{cfg.seq_len, cfg.proj_rank}) {
    throw ShapeError("linformer_attention: E must be [" + std::to_string(cfg.seq_len) +
                     "," + std::to_string(cfg.proj_rank) + "], got " +
                     shape_str(p.linformer_e.shape()));
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
  Tensor et = transpose(p.linformer_e);  // [k,n]
  Tensor ev, att;
  {
    Tensor kproj = matmul(et, project_heads(x, p.wk, p.bk, cfg, true));  // [B,H,k,dh]
    ev = matmul(et, project_heads(x, p.wv, p.bv, cfg, false));
    Tensor q = scale(project_heads(x, p.wq, p.bq, cfg, true), inv_sqrt);
    att = matmul(q, transpose(kproj));  // [B,H,n,k]
  }
  Tensor probs = softmax(att, -1);
  att = Tensor();
  Tensor ctx = matmul(probs, ev);
  probs = Tensor();
  ev = Tensor();
  return linear(merge_heads(ctx), p.wo, p.bo);
}

Tensor nystrom_attention(const Tensor& x, const MixerParams& p, const MixerConfig& cfg) {
  check_input(x, cfg, "nystrom_attention");
  const std::size_t n = x.shape()[1];
  const std::size_t m = cfg.landmarks;
  if (m > n) {
    throw ConfigError("nystrom_attention: landmarks " + std::to_string(m) +
                      " exceed sequence length " + std::to_string(n));
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
  Tensor v = project_heads(x, p.wv, p.bv, cfg, false);
  Tensor q = scale(project_heads(x, p.wq, p.bq, cfg, true), inv_sqrt);
  Tensor k = project_heads(x, p.wk, p.bk, cfg, true);
  Tensor q_land = segment_mean(q, m);
  Tensor k_land = segment_mean(k, m);

  Tensor f1 = softmax(matmul(q, transpose(k_land)), -1);       // [B,H,n,m]
  q = Tensor();
  Tensor f2 = softmax(matmul(q_land, transpose(k_land)), -1);  // [B,H,m,m]
  Tensor f3 = softmax(matmul(q_land, transpose(k)), -1);       // [B,H,m,n]
  k = Tensor();
  q_land = Tensor();
  k_land = Tensor();

  Tensor f2_pinv = cfg.pinv_exact ? svd_pinv(f2) : newton_schulz_pinv(f2, cfg.pinv_iters);
  f2 = Tensor();
  Tensor ctx = matmul(f1, matmul(f2_pinv, matmul(f3, v)));
  return linear(merge_heads(ctx), p.wo, p.bo);
}

Tensor fourier_mix(const Tensor& x) { return dft2_real(x); }

Tensor mlp_mixer_block(const Tensor& x, const MixerParams& p, const MixerConfig& cfg) {
  check_input(x, cfg, "mlp_mixer_block");
  const std::size_t n = x.shape()[1];
  if (n != cfg.seq_len) {
    throw ShapeError("mlp_mixer_block: token-mixing weights are bound to length " +
                     std::to_string(cfg.seq_len) + ", got n=" + std::to_string(n));
  }
  // token mixing over the n axis
  Tensor h = layer_norm(x, p.norm_token_gamma, p.norm_token_beta);
  h = transpose(h);  // [B,d,n]
  h = linear(h, p.token_w1, p.token_b1);
  h = gelu(h);
  h = linear(h, p.token_w2, p.token_b2);
  Tensor x1 = add(x, transpose(h));
  h = Tensor();
  // channel mixing over the d axis
  Tensor c = layer_norm(x1, p.norm_channel_gamma, p.norm_channel_beta);
  c = linear(c, p.channel_w1, p.channel_b1);
  c = gelu(c);
  c = linear(c, p.channel_w2, p.channel_b2);
  return add(x1, c);
}

Tensor mix(const Tensor& x, const MixerConfig& cfg, const MixerParams& p) {
  switch (cfg.kind) {
    case MixerKind::Exact: return exact_attention(x, p, cfg);
    case MixerKind::Performer: return performer_attention(x, p, cfg);
    case MixerKind::Linformer: return linformer_attention(x, p, cfg);
    case MixerKind::Nystrom: return nystrom_attention(x, p, cfg);
    case MixerKind::Fourier: return fourier_mix(x);
    case MixerKind::MlpMix: return mlp_mixer_block(x, p, cfg);
  }
  throw ConfigError("mix: unknown mixer kind");
}

MixerParams init_mixer_params(const MixerConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.model_dim;
  MixerParams p;
  if (cfg.kind == MixerKind::MlpMix) {
    const std::size_t n = cfg.seq_len, t = cfg.token_mlp_dim, f = cfg.channel_mlp_dim;
    p.norm_token_gamma = Tensor(Shape{d}, 1.0);
    p.norm_token_beta = Tensor(Shape{d}, 0.0);
    p.token_w1 = trunc_normal({n, t}, rng, 0.02);
    p.token_b1 = Tensor(Shape{t}, 0.0);
    p.token_w2 = trunc_normal({t, n}, rng, 0.02);
    p.token_b2 = Tensor(Shape{n}, 0.0);
    p.norm_channel_gamma = Tensor(Shape{d}, 1.0);
    p.norm_channel_beta = Tensor(Shape{d}, 0.0);
    p.channel_w1 = trunc_normal({d, f}, rng, 0.02);
    p.channel_b1 = Tensor(Shape{f}, 0.0);
    p.channel_w2 = trunc_normal({f, d}, rng, 0.02);
    p.channel_b2 = Tensor(Shape{d}, 0.0);
    return p;
  }
  if (cfg.kind == MixerKind::Fourier) return p;
  p.wq = trunc_normal({d, d}, rng, 0.02);
  p.bq = Tensor(Shape{d}, 0.0);
  p.wk = trunc_normal({d, d}, rng, 0.02);
  p.bk = Tensor(Shape{d}, 0.0);
  p.wv = trunc_normal({d, d}, rng, 0.02);
  p.bv = Tensor(Shape{d}, 0.0);
  p.wo = trunc_normal({d, d}, rng, 0.02);
  p.bo = Tensor(Shape{d}, 0.0);
  if (cfg.kind == MixerKind::Linformer) {
    p.linformer_e = randn({cfg.seq_len, cfg.proj_rank}, rng,
                          1.0 / std::sqrt(static_cast<double>(cfg.seq_len)));
  }
  return p;
}

}  // namespace vx
