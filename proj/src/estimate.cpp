#include "vx/estimate.hpp"

#include <algorithm>

namespace vx {

namespace {

// Live scalars at the worst moment of one mixer call, input [B,n,d]
// included (the caller's normed copy), output excluded from the caller side.
std::size_t mixer_peak(const MixerConfig& m, std::size_t n, std::size_t B) {
  const std::size_t d = m.model_dim;
  const std::size_t H = m.heads;
  const std::size_t dh = m.head_dim();
  const std::size_t nd = B * n * d;
  switch (m.kind) {
    case MixerKind::Exact: {
      // phase 1 (q k^T): x + q,k,kt,v + att;  phase 2 (softmax): x + v + 2 att
      const std::size_t att = B * H * n * n;
      return std::max(5 * nd + att, 2 * nd + 2 * att) + nd;
    }
    case MixerKind::Performer: {
      // x + phi_q + phi_k + v + kv + num/den + merge temps
      return 6 * nd + 2 * B * H * dh * dh + B * H * n + nd;
    }
    case MixerKind::Linformer: {
      const std::size_t att = B * H * n * m.proj_rank;
      const std::size_t proj = B * m.proj_rank * d;
      // phase 1: x + k,v full + projections; phase 2: softmax over n x k
      return std::max(5 * nd + 2 * proj + att, 2 * nd + 2 * proj + 2 * att) + nd;
    }
    case MixerKind::Nystrom: {
      const std::size_t land = B * m.landmarks * d;
      const std::size_t kern = B * H * n * m.landmarks;
      const std::size_t mm = B * H * m.landmarks * m.landmarks;
      // q,k,v + landmarks + kernels (f1,f3 live together) + pinv temps
      return 4 * nd + 2 * land + 2 * kern + 2 * kern + 6 * mm + nd;
    }
    case MixerKind::Fourier:
      // x + two hidden-pass intermediates + output
      return 4 * nd;
    case MixerKind::MlpMix: {
      const std::size_t tok = B * d * m.token_mlp_dim;
      const std::size_t chan = B * n * m.channel_mlp_dim;
      return 4 * nd + std::max(tok, chan) + nd;
    }
  }
  return 0;
}

std::size_t mixer_macs(const MixerConfig& m, std::size_t n) {
  const std::size_t d = m.model_dim;
  const std::size_t H = m.heads;
  const std::size_t dh = m.head_dim();
  const std::size_t proj = m.kind == MixerKind::Fourier || m.kind == MixerKind::MlpMix
                               ? 0
                               : 4 * n * d * d;  // q,k,v,o projections
  switch (m.kind) {
    case MixerKind::Exact:
      return proj + 2 * n * n * d;  // q k^T and probs*v, summed over heads
    case MixerKind::Performer:
      return proj + 2 * n * d * dh + n * d;
    case MixerKind::Linformer:
      return proj + 4 * n * m.proj_rank * d;  // e^T k, e^T v, q(ek)^T, probs(ev)
    case MixerKind::Nystrom: {
      const std::size_t mm = m.landmarks;
      return proj + 3 * n * mm * d + mm * mm * d + m.pinv_iters * 4 * H * mm * mm * mm;
    }
    case MixerKind::Fourier:
      return 2 * n * d * d + 2 * n * n * d;  // cos+sin passes per axis
    case MixerKind::MlpMix:
      return 2 * d * n * m.token_mlp_dim + 2 * n * d * m.channel_mlp_dim;
  }
  return 0;
}

}  // namespace

std::size_t estimate_mixer_scalars(const MixerConfig& mixer, std::size_t n,
                                   std::size_t batch) {
  return mixer_peak(mixer, n, batch);
}

std::size_t estimate_mixer_macs(const MixerConfig& mixer, std::size_t n) {
  return mixer_macs(mixer, n);
}

MemoryEstimate estimate_activation_memory(const ModelConfig& raw, std::size_t n,
                                          std::size_t batch) {
  ModelConfig cfg = raw.resolved();
  cfg.mixer.seq_len = n;
  const std::size_t d = cfg.mixer.model_dim;
  const std::size_t B = batch;
  const std::size_t nd = B * n * d;

  MemoryEstimate est;
  // embedding stage (token counts scale with n; geometry details are minor)
  std::size_t embed;
  if (cfg.embedding.kind == EmbeddingKind::LinearPatch) {
    const std::size_t in_dim =
        cfg.image_channels * cfg.embedding.patch_size * cfg.embedding.patch_size;
    embed = B * n * in_dim + 3 * nd;  // patch tokens + embed/prepend/pos chain
  } else {
    std::size_t worst = 0;
    std::size_t prev = cfg.image_channels;
    for (std::size_t c : cfg.embedding.stem_channels) {
      // input maps + im2col columns (one sample at a time) + output maps
      worst = std::max(worst, B * n * (prev + c) + n * prev * 9);
      prev = c;
    }
    embed = worst + 2 * nd;  // plus flatten/transpose pair
  }
  est.stages.push_back({"embedding", embed});

  MixerConfig mix_cfg = cfg.mixer;
  mix_cfg.seq_len = n;
  est.stages.push_back({"mixer", nd + mixer_peak(mix_cfg, n, B)});
  if (cfg.mixer.kind != MixerKind::MlpMix) {
    est.stages.push_back({"mlp", 3 * nd + B * n * cfg.mlp_dim});
  }
  est.stages.push_back({"head", 2 * nd + B * (d + cfg.num_classes)});

  for (const auto& s : est.stages) est.peak_scalars = std::max(est.peak_scalars, s.scalars);
  return est;
}

FlopEstimate estimate_flops(const ModelConfig& raw, std::size_t n) {
  ModelConfig cfg = raw.resolved();
  cfg.mixer.seq_len = n;
  const std::size_t d = cfg.mixer.model_dim;
  FlopEstimate est;

  std::size_t embed;
  if (cfg.embedding.kind == EmbeddingKind::LinearPatch) {
    const std::size_t in_dim =
        cfg.image_channels * cfg.embedding.patch_size * cfg.embedding.patch_size;
    embed = n * in_dim * d;
  } else {
    embed = 0;
    std::size_t prev = cfg.image_channels;
    for (std::size_t c : cfg.embedding.stem_channels) {
      embed += n * c * prev * 9;
      prev = c;
    }
  }
  est.sections.push_back({"embedding", embed});

  MixerConfig mix_cfg = cfg.mixer;
  mix_cfg.seq_len = n;
  const std::size_t per_mixer = mixer_macs(mix_cfg, n);
  est.sections.push_back({"mixers", cfg.depth * per_mixer});
  if (cfg.mixer.kind != MixerKind::MlpMix) {
    est.sections.push_back({"mlps", cfg.depth * 2 * n * d * cfg.mlp_dim});
  }
  est.sections.push_back({"head", d * cfg.num_classes});

  for (const auto& s : est.sections) est.total_macs += s.macs;
  return est;
}

}  // namespace vx
