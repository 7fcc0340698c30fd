#include "vx/model.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "vx/ops.hpp"
#include "vx/rng.hpp"

namespace vx {

ModelConfig ModelConfig::resolved() const {
  ModelConfig r = *this;
  r.embedding.model_dim = r.mixer.model_dim;
  const std::size_t n = r.seq_len();
  if (r.mixer.seq_len == 0) r.mixer.seq_len = n;
  if (r.mixer.kind == MixerKind::MlpMix && r.mixer.channel_mlp_dim == 0) {
    r.mixer.channel_mlp_dim = r.mlp_dim;
  }
  if (r.mixer.kind == MixerKind::MlpMix && r.mixer.token_mlp_dim == 0) {
    r.mixer.token_mlp_dim = n;
  }
  if (r.position.kind == PositionKind::Learnable1D && r.position.max_len == 0) {
    r.position.max_len = n;
  }
  r.mixer.rope_base = r.position.kind == PositionKind::Rope ? r.position.rope_base : 0.0;
  r.validate();
  return r;
}

void ModelConfig::validate() const {
  embedding.validate();
  mixer.validate();
  if (depth == 0) throw ConfigError("model: depth must be positive");
  if (mlp_dim == 0) throw ConfigError("model: mlp_dim must be positive");
  if (num_classes == 0) throw ConfigError("model: num_classes must be positive");
  if (dropout < 0 || dropout >= 1) throw ConfigError("model: dropout must be in [0,1)");
  if (embedding.model_dim != mixer.model_dim) {
    throw ConfigError("model: embedding dim " + std::to_string(embedding.model_dim) +
                      " disagrees with mixer dim " + std::to_string(mixer.model_dim));
  }
  const std::size_t n = seq_len();
  if (mixer.seq_len != 0 && mixer.seq_len != n) {
    throw ConfigError("model: mixer bound length " + std::to_string(mixer.seq_len) +
                      " disagrees with derived sequence length " + std::to_string(n));
  }
  if (position.kind == PositionKind::Learnable1D && position.max_len != 0 &&
      position.max_len < n) {
    throw ConfigError("model: position table rows " + std::to_string(position.max_len) +
                      " shorter than sequence length " + std::to_string(n));
  }
  if (position.kind == PositionKind::Rope && mixer.kind == MixerKind::MlpMix) {
    throw ConfigError("model: rotary positions apply to q/k attention mixers only");
  }
  if (position.kind == PositionKind::Rope && mixer.kind == MixerKind::Fourier) {
    throw ConfigError("model: the fourier mixer has no q/k to rotate");
  }
  if (mixer.kind == MixerKind::Nystrom && mixer.landmarks > n) {
    throw ConfigError("model: nystrom landmarks " + std::to_string(mixer.landmarks) +
                      " exceed sequence length " + std::to_string(n));
  }
}

std::size_t ParameterManifest::subtotal(const std::string& prefix) const {
  std::size_t acc = 0;
  for (const auto& e : entries) {
    if (e.name.rfind(prefix, 0) == 0) acc += e.count;
  }
  return acc;
}

void for_each_parameter(
    const ModelConfig& raw,
    const std::function<void(const std::string&, const Shape&, ParamInit)>& param,
    const std::function<void(const std::string&, const Shape&)>& buffer) {
  const ModelConfig cfg = raw.resolved();
  const std::size_t d = cfg.mixer.model_dim;
  const std::size_t n = cfg.seq_len();

  if (cfg.embedding.kind == EmbeddingKind::LinearPatch) {
    const std::size_t in_dim =
        cfg.image_channels * cfg.embedding.patch_size * cfg.embedding.patch_size;
    param("embed.weight", {in_dim, d}, ParamInit::TruncNormal);
    param("embed.bias", {d}, ParamInit::Zero);
  } else {
    std::size_t prev = cfg.image_channels;
    for (std::size_t s = 0; s < cfg.embedding.stem_channels.size(); ++s) {
      const std::size_t c = cfg.embedding.stem_channels[s];
      const std::string base = "stem.conv" + std::to_string(s + 1);
      param(base + ".weight", {c, prev, 3, 3}, ParamInit::TruncNormal);
      param(base + ".bias", {c}, ParamInit::Zero);
      prev = c;
    }
  }
  if (cfg.uses_class_token()) param("cls_token", {d}, ParamInit::Zero);
  if (cfg.position.kind == PositionKind::Learnable1D) {
    param("pos_table", {cfg.position.max_len, d}, ParamInit::TruncNormal);
  }

  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string L = "layers." + std::to_string(i) + ".";
    if (cfg.mixer.kind == MixerKind::MlpMix) {
      const std::size_t t = cfg.mixer.token_mlp_dim;
      const std::size_t f = cfg.mixer.channel_mlp_dim;
      param(L + "mixer.token_norm.gamma", {d}, ParamInit::One);
      param(L + "mixer.token_norm.beta", {d}, ParamInit::Zero);
      param(L + "mixer.token_w1", {n, t}, ParamInit::TruncNormal);
      param(L + "mixer.token_b1", {t}, ParamInit::Zero);
      param(L + "mixer.token_w2", {t, n}, ParamInit::TruncNormal);
      param(L + "mixer.token_b2", {n}, ParamInit::Zero);
      param(L + "mixer.channel_norm.gamma", {d}, ParamInit::One);
      param(L + "mixer.channel_norm.beta", {d}, ParamInit::Zero);
      param(L + "mixer.channel_w1", {d, f}, ParamInit::TruncNormal);
      param(L + "mixer.channel_b1", {f}, ParamInit::Zero);
      param(L + "mixer.channel_w2", {f, d}, ParamInit::TruncNormal);
      param(L + "mixer.channel_b2", {d}, ParamInit::Zero);
      continue;
    }
    param(L + "norm1.gamma", {d}, ParamInit::One);
    param(L + "norm1.beta", {d}, ParamInit::Zero);
    if (cfg.mixer.kind != MixerKind::Fourier) {
      param(L + "mixer.wq", {d, d}, ParamInit::TruncNormal);
      param(L + "mixer.bq", {d}, ParamInit::Zero);
      param(L + "mixer.wk", {d, d}, ParamInit::TruncNormal);
      param(L + "mixer.bk", {d}, ParamInit::Zero);
      param(L + "mixer.wv", {d, d}, ParamInit::TruncNormal);
      param(L + "mixer.bv", {d}, ParamInit::Zero);
      param(L + "mixer.wo", {d, d}, ParamInit::TruncNormal);
      param(L + "mixer.bo", {d}, ParamInit::Zero);
      if (cfg.mixer.kind == MixerKind::Linformer && buffer) {
        buffer(L + "mixer.proj_e", {n, cfg.mixer.proj_rank});
      }
    }
    param(L + "norm2.gamma", {d}, ParamInit::One);
    param(L + "norm2.beta", {d}, ParamInit::Zero);
    param(L + "mlp.w1", {d, cfg.mlp_dim}, ParamInit::TruncNormal);
    param(L + "mlp.b1", {cfg.mlp_dim}, ParamInit::Zero);
    param(L + "mlp.w2", {cfg.mlp_dim, d}, ParamInit::TruncNormal);
    param(L + "mlp.b2", {d}, ParamInit::Zero);
  }

  param("final_norm.gamma", {d}, ParamInit::One);
  param("final_norm.beta", {d}, ParamInit::Zero);
  param("head.weight", {d, cfg.num_classes}, ParamInit::TruncNormal);
  param("head.bias", {cfg.num_classes}, ParamInit::Zero);
}

ParameterManifest count_params(const ModelConfig& cfg) {
  ParameterManifest m;
  for_each_parameter(cfg, [&](const std::string& name, const Shape& shape, ParamInit) {
    m.entries.push_back({name, shape, numel(shape)});
    m.total += numel(shape);
  });
  return m;
}

std::string config_signature(const ModelConfig& raw) {
  const ModelConfig cfg = raw.resolved();
  std::map<std::string, std::string> kv;
  kv["embedding.kind"] = embedding_kind_name(cfg.embedding.kind);
  kv["embedding.patch_size"] = std::to_string(cfg.embedding.patch_size);
  {
    std::ostringstream os;
    for (std::size_t i = 0; i < cfg.embedding.stem_channels.size(); ++i) {
      if (i) os << ',';
      os << cfg.embedding.stem_channels[i];
    }
    kv["embedding.stem_channels"] = os.str();
  }
  kv["embedding.stem_stride_first"] = std::to_string(cfg.embedding.stem_stride_first);
  kv["position.kind"] = position_kind_name(cfg.position.kind);
  kv["position.max_len"] = std::to_string(cfg.position.max_len);
  {
    std::ostringstream os;
    os << cfg.position.rope_base;
    kv["position.rope_base"] = os.str();
  }
  kv["mixer.kind"] = mixer_kind_name(cfg.mixer.kind);
  kv["mixer.heads"] = std::to_string(cfg.mixer.heads);
  kv["mixer.landmarks"] = std::to_string(cfg.mixer.landmarks);
  kv["mixer.proj_rank"] = std::to_string(cfg.mixer.proj_rank);
  kv["mixer.pinv_iters"] = std::to_string(cfg.mixer.pinv_iters);
  kv["mixer.pinv_exact"] = cfg.mixer.pinv_exact ? "true" : "false";
  kv["mixer.token_mlp_dim"] = std::to_string(cfg.mixer.token_mlp_dim);
  kv["mixer.channel_mlp_dim"] = std::to_string(cfg.mixer.channel_mlp_dim);
  kv["model.dim"] = std::to_string(cfg.mixer.model_dim);
  kv["model.depth"] = std::to_string(cfg.depth);
  kv["model.mlp_dim"] = std::to_string(cfg.mlp_dim);
  kv["model.classes"] = std::to_string(cfg.num_classes);
  kv["model.image_channels"] = std::to_string(cfg.image_channels);
  kv["model.image_h"] = std::to_string(cfg.image_h);
  kv["model.image_w"] = std::to_string(cfg.image_w);
  {
    std::ostringstream os;
    os << cfg.dropout;
    kv["model.dropout"] = os.str();
  }
  std::ostringstream out;
  for (const auto& [k, v] : kv) out << k << '=' << v << '\n';
  return out.str();
}

std::uint64_t config_digest(const ModelConfig& cfg) {
  const std::string s = config_signature(cfg);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// ------------------------------ Model ------------------------------

Model::Model(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg.resolved()), seed_(seed) {
  Rng prng(Rng::derive(seed, 1));
  for_each_parameter(
      cfg_,
      [&](const std::string& name, const Shape& shape, ParamInit init) {
        Tensor t;
        switch (init) {
          case ParamInit::TruncNormal: t = trunc_normal(Shape(shape), prng, 0.02); break;
          case ParamInit::Zero: t = Tensor(Shape(shape), 0.0); break;
          case ParamInit::One: t = Tensor(Shape(shape), 1.0); break;
        }
        t.set_requires_grad(true);
        index_[name] = params_.size();
        params_.emplace_back(name, t);
        manifest_.entries.push_back({name, shape, numel(shape)});
        manifest_.total += numel(shape);
      },
      [&](const std::string& name, const Shape& shape) {
        Rng brng(Rng::derive(seed, 0xb0f + buffers_.size()));
        const double sd = 1.0 / std::sqrt(static_cast<double>(shape[0]));
        buffers_.emplace_back(name, randn(Shape(shape), brng, sd));
      });
  wire_views();
}

Tensor& Model::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
  return params_[it->second].second;
}

void Model::wire_views() {
  auto get = [&](const std::string& name) -> Tensor { return param(name); };
  if (cfg_.embedding.kind == EmbeddingKind::LinearPatch) {
    embed_w_ = get("embed.weight");
    embed_b_ = get("embed.bias");
  } else {
    for (std::size_t s = 0; s < cfg_.embedding.stem_channels.size(); ++s) {
      const std::string base = "stem.conv" + std::to_string(s + 1);
      stem_.w.push_back(get(base + ".weight"));
      stem_.b.push_back(get(base + ".bias"));
    }
  }
  if (cfg_.uses_class_token()) cls_ = get("cls_token");
  if (cfg_.position.kind == PositionKind::Learnable1D) pos_table_ = get("pos_table");

  std::size_t buf_at = 0;
  for (std::size_t i = 0; i < cfg_.depth; ++i) {
    const std::string L = "layers." + std::to_string(i) + ".";
    LayerParams lp;
    if (cfg_.mixer.kind == MixerKind::MlpMix) {
      lp.mixer.norm_token_gamma = get(L + "mixer.token_norm.gamma");
      lp.mixer.norm_token_beta = get(L + "mixer.token_norm.beta");
      lp.mixer.token_w1 = get(L + "mixer.token_w1");
      lp.mixer.token_b1 = get(L + "mixer.token_b1");
      lp.mixer.token_w2 = get(L + "mixer.token_w2");
      lp.mixer.token_b2 = get(L + "mixer.token_b2");
      lp.mixer.norm_channel_gamma = get(L + "mixer.channel_norm.gamma");
      lp.mixer.norm_channel_beta = get(L + "mixer.channel_norm.beta");
      lp.mixer.channel_w1 = get(L + "mixer.channel_w1");
      lp.mixer.channel_b1 = get(L + "mixer.channel_b1");
      lp.mixer.channel_w2 = get(L + "mixer.channel_w2");
      lp.mixer.channel_b2 = get(L + "mixer.channel_b2");
      layers_.push_back(std::move(lp));
      continue;
    }
    lp.norm1_gamma = get(L + "norm1.gamma");
    lp.norm1_beta = get(L + "norm1.beta");
    if (cfg_.mixer.kind != MixerKind::Fourier) {
      lp.mixer.wq = get(L + "mixer.wq");
      lp.mixer.bq = get(L + "mixer.bq");
      lp.mixer.wk = get(L + "mixer.wk");
      lp.mixer.bk = get(L + "mixer.bk");
      lp.mixer.wv = get(L + "mixer.wv");
      lp.mixer.bv = get(L + "mixer.bv");
      lp.mixer.wo = get(L + "mixer.wo");
      lp.mixer.bo = get(L + "mixer.bo");
      if (cfg_.mixer.kind == MixerKind::Linformer) {
        lp.mixer.linformer_e = buffers_[buf_at++].second;
      }
    }
    lp.norm2_gamma = get(L + "norm2.gamma");
    lp.norm2_beta = get(L + "norm2.beta");
    lp.mlp_w1 = get(L + "mlp.w1");
    lp.mlp_b1 = get(L + "mlp.b1");
    lp.mlp_w2 = get(L + "mlp.w2");
    lp.mlp_b2 = get(L + "mlp.b2");
    layers_.push_back(std::move(lp));
  }
  final_gamma_ = get("final_norm.gamma");
  final_beta_ = get("final_norm.beta");
  head_w_ = get("head.weight");
  head_b_ = get("head.bias");
}

Tensor Model::forward(const Tensor& images, Rng* dropout_rng) const {
  if (images.rank() != 4 || images.shape()[1] != cfg_.image_channels ||
      images.shape()[2] != cfg_.image_h || images.shape()[3] != cfg_.image_w) {
    throw ShapeError("forward: images " + shape_str(images.shape()) +
                     " do not match configured [B," + std::to_string(cfg_.image_channels) +
                     "," + std::to_string(cfg_.image_h) + "," + std::to_string(cfg_.image_w) + "]");
  }
  const bool drop = dropout_rng != nullptr && cfg_.dropout > 0;

  Tensor x;
  if (cfg_.embedding.kind == EmbeddingKind::LinearPatch) {
    x = linear_patch_embed(patchify(images, cfg_.embedding.patch_size), embed_w_, embed_b_);
  } else {
    x = conv_stem(images, stem_, cfg_.embedding);
  }
  if (cfg_.uses_class_token()) x = prepend_class_token(x, cls_);
  if (cfg_.position.kind == PositionKind::Learnable1D) x = add_learnable_pos(x, pos_table_);
  if (drop) x = dropout(x, cfg_.dropout, *dropout_rng);

  for (const LayerParams& lp : layers_) {
    if (cfg_.mixer.kind == MixerKind::MlpMix) {
      x = mlp_mixer_block(x, lp.mixer, cfg_.mixer);
      continue;
    }
    {
      Tensor mixed = mix(layer_norm(x, lp.norm1_gamma, lp.norm1_beta), cfg_.mixer, lp.mixer);
      if (drop) mixed = dropout(mixed, cfg_.dropout, *dropout_rng);
      x = add(x, mixed);
    }
    {
      Tensor h = linear(layer_norm(x, lp.norm2_gamma, lp.norm2_beta), lp.mlp_w1, lp.mlp_b1);
      h = gelu(h);
      if (drop) h = dropout(h, cfg_.dropout, *dropout_rng);
      h = linear(h, lp.mlp_w2, lp.mlp_b2);
      x = add(x, h);
    }
  }

  x = layer_norm(x, final_gamma_, final_beta_);
  Tensor pooled;
  if (cfg_.uses_class_token()) {
    pooled = reshape(slice(x, 1, 0, 1), {x.shape()[0], cfg_.mixer.model_dim});
  } else {
    pooled = mean_axis(x, 1);
  }
  return linear(pooled, head_w_, head_b_);
}

// --------------------------- checkpoint io ---------------------------

namespace {
void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}
void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}
std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
void put_doubles(std::ostream& os, const double* p, std::size_t n) {
  // doubles serialize as little-endian u64 bit patterns
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, p + i, 8);
    put_u64(os, bits);
  }
}
void get_doubles(std::istream& is, double* p, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t bits = get_u64(is);
    std::memcpy(p + i, &bits, 8);
  }
}
void put_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  put_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) put_u64(os, e);
  put_doubles(os, t.data(), t.size());
}
constexpr char kMagic[4] = {'V', 'I', 'X', 'F'};
constexpr std::uint32_t kFormatVersion = 1;
}  // namespace

void checkpoint_save(const Model& model, const std::string& path,
                     const TrainState* train_state) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("checkpoint_save: cannot open '" + path + "'");
  os.write(kMagic, 4);
  put_u32(os, kFormatVersion);
  put_u64(os, config_digest(model.config()));
  put_u32(os, static_cast<std::uint32_t>(model.named_params().size()));
  for (const auto& [name, t] : model.named_params()) put_tensor(os, name, t);
  put_u32(os, static_cast<std::uint32_t>(model.named_buffers().size()));
  for (const auto& [name, t] : model.named_buffers()) put_tensor(os, name, t);
  os.put(train_state ? 1 : 0);
  if (train_state) {
    put_u64(os, train_state->step);
    put_u64(os, train_state->epoch);
    put_u64(os, train_state->pos_in_epoch);
    for (const Tensor& t : train_state->adam_m) put_doubles(os, t.data(), t.size());
    for (const Tensor& t : train_state->adam_v) put_doubles(os, t.data(), t.size());
  }
  if (!os) throw DataError("checkpoint_save: write failed for '" + path + "'");
}

void checkpoint_load(Model& model, const std::string& path, TrainState* train_state) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint_load: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw DataError("checkpoint_load: '" + path + "' is not a VIXF container");
  }
  const std::uint32_t version = get_u32(is);
  if (version != kFormatVersion) {
    throw DataError("checkpoint_load: unsupported format version " + std::to_string(version));
  }
  const std::uint64_t digest = get_u64(is);
  if (digest != config_digest(model.config())) {
    throw DataError("checkpoint_load: config digest mismatch for '" + path + "'");
  }
  const std::uint32_t n_params = get_u32(is);
  if (n_params != model.named_params().size()) {
    throw DataError("checkpoint_load: parameter count mismatch");
  }
  auto read_into = [&](const std::string& want_name, Tensor& t) {
    const std::uint32_t len = get_u32(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const std::uint32_t rank = get_u32(is);
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) shape[i] = get_u64(is);
    if (!is || name != want_name || !same_shape(shape, t.shape())) {
      throw DataError("checkpoint_load: entry '" + name + "' does not match manifest entry '" +
                      want_name + "'");
    }
    get_doubles(is, t.data(), t.size());
  };
  for (auto& [name, t] : model.named_params()) read_into(name, t);
  const std::uint32_t n_buffers = get_u32(is);
  if (n_buffers != model.named_buffers().size()) {
    throw DataError("checkpoint_load: buffer count mismatch");
  }
  for (auto& [name, t] : const_cast<std::vector<std::pair<std::string, Tensor>>&>(
           model.named_buffers())) {
    read_into(name, t);
  }
  const int has_train = is.get();
  if (has_train == 1 && train_state) {
    train_state->step = get_u64(is);
    train_state->epoch = get_u64(is);
    train_state->pos_in_epoch = get_u64(is);
    train_state->adam_m.clear();
    train_state->adam_v.clear();
    for (const auto& [name, t] : model.named_params()) {
      Tensor m(t.shape(), 0.0);
      get_doubles(is, m.data(), m.size());
      train_state->adam_m.push_back(m);
    }
    for (const auto& [name, t] : model.named_params()) {
      Tensor v(t.shape(), 0.0);
      get_doubles(is, v.data(), v.size());
      train_state->adam_v.push_back(v);
    }
  } else if (train_state) {
    throw DataError("checkpoint_load: '" + path + "' has no training section");
  }
  if (!is) throw DataError("checkpoint_load: truncated file '" + path + "'");
}

// ------------------- ledger & reference reconciliation -------------------

std::vector<LedgerItem> convention_ledger(const ModelConfig& raw) {
  const ModelConfig cfg = raw.resolved();
  std::vector<LedgerItem> L;
  L.push_back({"precision", "f64"});
  L.push_back({"init.weights", "trunc_normal(sigma=0.02, clip=2sigma)"});
  L.push_back({"init.biases", "zeros"});
  L.push_back({"init.class_token", "zeros"});
  L.push_back({"norm.placement", "pre"});
  L.push_back({"norm.affine", "gamma+beta"});
  L.push_back({"norm.final", "yes"});
  L.push_back({"norm.eps", "1e-5"});
  L.push_back({"head.bias", "yes"});
  L.push_back({"pool", cfg.uses_class_token() ? "class_token" : "mean"});
  L.push_back({"position.kind", position_kind_name(cfg.position.kind)});
  if (cfg.position.kind == PositionKind::Learnable1D) {
    L.push_back({"position.table", std::to_string(cfg.position.max_len) + "x" +
                                       std::to_string(cfg.mixer.model_dim)});
  }
  if (cfg.position.kind == PositionKind::Rope) {
    L.push_back({"rope.pairing", "consecutive coordinate pairs"});
    L.push_back({"rope.class_token_position", "0"});
    L.push_back({"rope.parameters", "0 (learnable table removed)"});
  }
  if (cfg.embedding.kind == EmbeddingKind::LinearPatch) {
    L.push_back({"embed.kind", "linear_patch"});
    L.push_back({"embed.bias", "yes"});
  } else {
    L.push_back({"embed.kind", "conv_stem"});
    L.push_back({"stem.kernels", "3x3, same padding"});
    L.push_back({"stem.bias", "yes"});
    L.push_back({"stem.nonlinearity", "relu between stages, none after last"});
    L.push_back({"stem.normalization", "none"});
  }
  switch (cfg.mixer.kind) {
    case MixerKind::Exact:
    case MixerKind::Performer:
    case MixerKind::Linformer:
    case MixerKind::Nystrom:
      L.push_back({"attn.projections", "separate wq/wk/wv/wo"});
      L.push_back({"attn.qkv_bias", "yes"});
      L.push_back({"attn.out_bias", "yes"});
      L.push_back({"attn.head_layout", "full per-head k and v"});
      break;
    default:
      break;
  }
  if (cfg.mixer.kind == MixerKind::Performer) {
    L.push_back({"performer.kernel", "relu"});
    L.push_back({"performer.denom_eps", "1e-6"});
  }
  if (cfg.mixer.kind == MixerKind::Linformer) {
    L.push_back({"linformer.e", "non-learnable gaussian, var 1/seq_len, shared k/v"});
  }
  if (cfg.mixer.kind == MixerKind::Nystrom) {
    L.push_back({"nystrom.landmarks", "contiguous segment means, last absorbs remainder"});
    L.push_back({"nystrom.pinv", cfg.mixer.pinv_exact
                                     ? "exact svd"
                                     : "newton_schulz x" + std::to_string(cfg.mixer.pinv_iters)});
  }
  if (cfg.mixer.kind == MixerKind::MlpMix) {
    L.push_back({"mixer.token_mlp_dim", std::to_string(cfg.mixer.token_mlp_dim)});
    L.push_back({"mixer.channel_mlp_dim", std::to_string(cfg.mixer.channel_mlp_dim)});
  }
  return L;
}

long long Reconciliation::explained() const {
  long long acc = 0;
  for (const auto& it : items) acc += it.delta;
  return acc;
}

long long Reconciliation::residual() const { return target - (ours + explained()); }

Reconciliation reconcile_reference_count(const ModelConfig& raw, long long target) {
  const ModelConfig cfg = raw.resolved();
  const long long d = static_cast<long long>(cfg.mixer.model_dim);
  const long long L = static_cast<long long>(cfg.depth);
  const long long dh = static_cast<long long>(cfg.mixer.head_dim());
  const long long H = static_cast<long long>(cfg.mixer.heads);

  Reconciliation rec;
  rec.ours = static_cast<long long>(count_params(cfg).total);
  rec.target = target;

  if (cfg.uses_class_token()) {
    rec.items.push_back({"cls_token", -d, "reference total counts no class token"});
  }
  if (cfg.position.kind == PositionKind::Learnable1D) {
    rec.items.push_back({"pos_table",
                         -static_cast<long long>(cfg.position.max_len) * d,
                         "reference total counts no learnable position table"});
  }
  switch (cfg.mixer.kind) {
    case MixerKind::Exact:
      rec.items.push_back({"layers.*.mixer.bq/bk/bv", -3 * d * L,
                           "reference fuses qkv into one bias-free projection"});
      break;
    case MixerKind::Performer:
      break;  // reference q/k/v projections carry biases as well
    case MixerKind::Nystrom:
      rec.items.push_back({"layers.*.mixer.bq/bk/bv", -3 * d * L,
                           "reference fuses qkv into one bias-free projection"});
      rec.items.push_back({"(reference residual conv)", 33 * H * L,
                           "reference adds a depthwise value conv (kernel 33) "
                           "outside this mixer contract"});
      break;
    case MixerKind::Linformer:
      rec.items.push_back({"layers.*.mixer.bq/bk/bv", -3 * d * L,
                           "reference q/k/v projections are bias-free"});
      rec.items.push_back({"layers.*.mixer.wk", -(d * d - d * dh) * L,
                           "reference projects keys to a single shared head"});
      rec.items.push_back({"layers.*.mixer.wv", -d * d * L,
                           "reference reuses the key projection for values"});
      break;
    default:
      break;
  }
  return rec;
}

}  // namespace vx
