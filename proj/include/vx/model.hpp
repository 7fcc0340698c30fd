#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vx/embeddings.hpp"
#include "vx/mixers.hpp"
#include "vx/tensor.hpp"

namespace vx {

struct ModelConfig {
  EmbeddingConfig embedding;
  PositionConfig position;
  MixerConfig mixer;
  std::size_t depth = 4;
  std::size_t mlp_dim = 256;
  std::size_t num_classes = 10;
  std::size_t image_channels = 3;
  std::size_t image_h = 32;
  std::size_t image_w = 32;
  double dropout = 0.0;

  bool uses_class_token() const { return mixer.kind != MixerKind::MlpMix; }
  std::size_t image_tokens() const { return embedding.tokens_for(image_h, image_w); }
  std::size_t seq_len() const { return image_tokens() + (uses_class_token() ? 1 : 0); }

  // Fills derived fields (mixer.seq_len, mixer.channel_mlp_dim,
  // mixer.rope_base, position.max_len) and validates consistency.
  ModelConfig resolved() const;
  void validate() const;  // ConfigError naming the violated constraint
};

struct ManifestEntry {
  std::string name;
  Shape shape;
  std::size_t count = 0;
};

struct ParameterManifest {
  std::vector<ManifestEntry> entries;
  std::size_t total = 0;

  std::size_t subtotal(const std::string& prefix) const;
};

enum class ParamInit { TruncNormal, Zero, One };

// Deterministic walk over every learnable parameter; `buffer` (optional)
// receives the non-learnable tensors (e.g. the Linformer projection).
void for_each_parameter(
    const ModelConfig& cfg,
    const std::function<void(const std::string&, const Shape&, ParamInit)>& param,
    const std::function<void(const std::string&, const Shape&)>& buffer = nullptr);

// Counts from the config alone; equals an instantiated model's manifest.
ParameterManifest count_params(const ModelConfig& cfg);

// Canonical key=value serialization (sorted) and its FNV-1a digest; the
// digest guards checkpoints against config mismatches.
std::string config_signature(const ModelConfig& cfg);
std::uint64_t config_digest(const ModelConfig& cfg);

struct LayerParams {
  Tensor norm1_gamma, norm1_beta;
  Tensor norm2_gamma, norm2_beta;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  MixerParams mixer;
};

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  const ParameterManifest& manifest() const { return manifest_; }

  // logits [B, num_classes]; dropout only fires when a dropout_rng is given
  // (training mode) and cfg.dropout > 0.
  Tensor forward(const Tensor& images, Rng* dropout_rng = nullptr) const;

  std::vector<std::pair<std::string, Tensor>>& named_params() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& named_params() const { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& named_buffers() const { return buffers_; }
  Tensor& param(const std::string& name);

 private:
  void wire_views();

  ModelConfig cfg_;
  std::uint64_t seed_ = 0;
  ParameterManifest manifest_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::pair<std::string, Tensor>> buffers_;
  std::map<std::string, std::size_t> index_;

  // typed views over params_ (shared storage)
  Tensor embed_w_, embed_b_;
  ConvStemParams stem_;
  Tensor cls_, pos_table_;
  std::vector<LayerParams> layers_;
  Tensor final_gamma_, final_beta_;
  Tensor head_w_, head_b_;
};

// ---- checkpoint container ----
// "VIXF" magic, format version, config digest, manifest entries in order
// (name, shape, little-endian f64 data), buffers, then an optional training
// section (step counters + Adam moments) written by the trainer.
struct TrainState {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::uint64_t pos_in_epoch = 0;
  std::vector<Tensor> adam_m;  // aligned with manifest order
  std::vector<Tensor> adam_v;
};

void checkpoint_save(const Model& model, const std::string& path,
                     const TrainState* train_state = nullptr);
// Digest mismatch or malformed file -> DataError. Returns the training
// section when present and requested.
void checkpoint_load(Model& model, const std::string& path,
                     TrainState* train_state = nullptr);

// ---- convention ledger & published-count reconciliation ----
struct LedgerItem {
  std::string key;
  std::string value;
};
std::vector<LedgerItem> convention_ledger(const ModelConfig& cfg);

struct ReconItem {
  std::string entry;
  long long delta;  // added to our total to reach the reference convention
  std::string note;
};
struct Reconciliation {
  long long ours = 0;
  long long target = 0;
  std::vector<ReconItem> items;
  long long explained() const;
  long long residual() const;  // target - (ours + explained); 0 when itemized fully
};
// Itemizes our-count vs reference-convention deltas for this config against
// a published total.
Reconciliation reconcile_reference_count(const ModelConfig& cfg, long long target);

}  // namespace vx
