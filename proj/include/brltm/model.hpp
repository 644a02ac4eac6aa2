#pragma once

// Bidirectional transformer over multimodal event sequences: five summed
// embeddings (code, position, segment, age, gender), a stack of encoder
// layers, a masked-code head and a binary classification head.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "brltm/error.hpp"
#include "brltm/hash.hpp"
#include "brltm/rng.hpp"
#include "brltm/sequencer.hpp"
#include "brltm/tensor.hpp"

namespace brltm {

// ---------------------------------------------------------------------------
// Configuration

struct ModelConfig {
  std::string preset = "desk";
  std::size_t vocab_size = 0;
  std::size_t hidden_size = 32;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t intermediate_size = 64;
  std::size_t max_len = kDefaultMaxLen;
  std::size_t max_age = 120;
  double dropout = 0.1;
  bool tie_mlm = true;
  // Only the sinusoidal table is implemented; kept in the config so that
  // checkpoints say which fixed encoding they were trained with.
  std::string positional = "sinusoidal";

  void validate() const {
    if (hidden_size == 0 || n_layers == 0 || n_heads == 0 || intermediate_size == 0)
      throw ConfigError("model dimensions must be positive");
    if (hidden_size % n_heads != 0)
      throw ConfigError("hidden_size " + std::to_string(hidden_size) + " not divisible by n_heads " +
                        std::to_string(n_heads));
    if (vocab_size <= static_cast<std::size_t>(kFirstContentId))
      throw ConfigError("vocab_size must exceed the special tokens");
    if (max_len < 3) throw ConfigError("max_len must be at least 3");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0,1)");
    if (positional != "sinusoidal") throw ConfigError("unsupported positional encoding '" + positional + "'");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct PresetDims {
  std::string_view name;
  std::size_t hidden, layers, heads, intermediate;
};

// The four tuned configurations (all modalities, without topics, without
// procedures, without both) plus a small desk-scale configuration.
inline constexpr std::array<PresetDims, 5> kPresets = {{
    {"paper-all", 216, 9, 12, 512},
    {"paper-no-topic", 240, 9, 12, 512},
    {"paper-no-cpt", 252, 6, 12, 256},
    {"paper-no-topic-cpt", 264, 6, 12, 256},
    {"desk", 32, 2, 4, 64},
}};

inline ModelConfig preset_config(std::string_view name, std::size_t vocab_size) {
  for (const auto& p : kPresets)
    if (p.name == name) {
      ModelConfig c;
      c.preset = std::string(p.name);
      c.vocab_size = vocab_size;
      c.hidden_size = p.hidden;
      c.n_layers = p.layers;
      c.n_heads = p.heads;
      c.intermediate_size = p.intermediate;
      return c;
    }
  throw ConfigError("unknown preset '" + std::string(name) + "'");
}

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["preset"] = c.preset;
  j["vocab_size"] = c.vocab_size;
  j["hidden_size"] = c.hidden_size;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["intermediate_size"] = c.intermediate_size;
  j["max_len"] = c.max_len;
  j["max_age"] = c.max_age;
  j["dropout"] = c.dropout;
  j["tie_mlm"] = c.tie_mlm;
  j["positional"] = c.positional;
  return j;
}

// Overlays the keys present in `j` onto `base`.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {}) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "preset") base.preset = v.get<std::string>();
      else if (key == "vocab_size") base.vocab_size = v.get<std::size_t>();
      else if (key == "hidden_size") base.hidden_size = v.get<std::size_t>();
      else if (key == "n_layers") base.n_layers = v.get<std::size_t>();
      else if (key == "n_heads") base.n_heads = v.get<std::size_t>();
      else if (key == "intermediate_size") base.intermediate_size = v.get<std::size_t>();
      else if (key == "max_len") base.max_len = v.get<std::size_t>();
      else if (key == "max_age") base.max_age = v.get<std::size_t>();
      else if (key == "dropout") base.dropout = v.get<double>();
      else if (key == "tie_mlm") base.tie_mlm = v.get<bool>();
      else if (key == "positional") base.positional = v.get<std::string>();
      else throw ConfigError("unknown key '" + key + "' in model config");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return base;
}

// ---------------------------------------------------------------------------
// Parameters

template <class Real>
struct EncoderLayerParams {
  Tensor<Real> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<Real> ln1_gain, ln1_bias;
  Tensor<Real> ff1_w, ff1_b, ff2_w, ff2_b;
  Tensor<Real> ln2_gain, ln2_bias;
};

template <class Real>
struct NamedParam {
  std::string name;
  Tensor<Real> tensor;
  bool trainable = true;
  bool decay = true;  // false for biases and layer-norm parameters
};

template <class Real>
struct ModelParams {
  ModelConfig config;
  Tensor<Real> code_table;      // [vocab, hidden]
  Tensor<Real> segment_table;   // [2, hidden]
  Tensor<Real> age_table;       // [max_age + 1, hidden]
  Tensor<Real> gender_table;    // [2, hidden]
  Tensor<Real> position_table;  // [max_len, hidden], fixed
  Tensor<Real> emb_ln_gain, emb_ln_bias;
  std::vector<EncoderLayerParams<Real>> layers;
  Tensor<Real> mlm_decoder;  // [vocab, hidden]; only when the head is untied
  Tensor<Real> mlm_bias;     // [vocab]
  Tensor<Real> cls_weight;   // [hidden, 1]; undefined until a classifier is attached
  Tensor<Real> cls_bias;     // [1]

  bool has_classifier() const { return cls_weight.defined(); }

  // Declaration order: this is also the checkpoint order.
  std::vector<NamedParam<Real>> named(bool include_fixed = false) const {
    std::vector<NamedParam<Real>> out;
    out.push_back({"embeddings.code", code_table, true, true});
    out.push_back({"embeddings.segment", segment_table, true, true});
    out.push_back({"embeddings.age", age_table, true, true});
    out.push_back({"embeddings.gender", gender_table, true, true});
    if (include_fixed) out.push_back({"embeddings.position", position_table, false, false});
    out.push_back({"embeddings.ln.gain", emb_ln_gain, true, false});
    out.push_back({"embeddings.ln.bias", emb_ln_bias, true, false});
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      const std::string p = "layer" + std::to_string(i) + ".";
      out.push_back({p + "attn.q.w", l.wq, true, true});
      out.push_back({p + "attn.q.b", l.bq, true, false});
      out.push_back({p + "attn.k.w", l.wk, true, true});
      out.push_back({p + "attn.k.b", l.bk, true, false});
      out.push_back({p + "attn.v.w", l.wv, true, true});
      out.push_back({p + "attn.v.b", l.bv, true, false});
      out.push_back({p + "attn.out.w", l.wo, true, true});
      out.push_back({p + "attn.out.b", l.bo, true, false});
      out.push_back({p + "ln1.gain", l.ln1_gain, true, false});
      out.push_back({p + "ln1.bias", l.ln1_bias, true, false});
      out.push_back({p + "ffn.in.w", l.ff1_w, true, true});
      out.push_back({p + "ffn.in.b", l.ff1_b, true, false});
      out.push_back({p + "ffn.out.w", l.ff2_w, true, true});
      out.push_back({p + "ffn.out.b", l.ff2_b, true, false});
      out.push_back({p + "ln2.gain", l.ln2_gain, true, false});
      out.push_back({p + "ln2.bias", l.ln2_bias, true, false});
    }
    if (mlm_decoder.defined()) out.push_back({"mlm.decoder", mlm_decoder, true, true});
    out.push_back({"mlm.bias", mlm_bias, true, false});
    if (has_classifier()) {
      out.push_back({"classifier.w", cls_weight, true, true});
      out.push_back({"classifier.b", cls_bias, true, false});
    }
    return out;
  }

  void zero_grad() const {
    for (auto p : named(false)) p.tensor.zero_grad();
  }

  // Deep copy with fresh leaves.
  ModelParams clone() const {
    ModelParams c = *this;
    auto copy = [](Tensor<Real>& t) {
      if (t.defined()) t = t.detach(t.requires_grad());
    };
    for (auto* t : {&c.code_table, &c.segment_table, &c.age_table, &c.gender_table, &c.position_table,
                    &c.emb_ln_gain, &c.emb_ln_bias, &c.mlm_decoder, &c.mlm_bias, &c.cls_weight, &c.cls_bias})
      copy(*t);
    for (auto& l : c.layers)
      for (auto* t : {&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.ln1_gain, &l.ln1_bias, &l.ff1_w,
                      &l.ff1_b, &l.ff2_w, &l.ff2_b, &l.ln2_gain, &l.ln2_bias})
        copy(*t);
    return c;
  }

  // Converts between precisions (e.g. float training, double checking).
  template <class Other>
  ModelParams<Other> cast() const;
};

namespace detail {

inline std::uint64_t name_id(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

template <class Real>
Tensor<Real> init_normal(Shape shape, std::uint64_t seed, std::string_view name) {
  Rng rng = Rng::stream(seed, {name_id(name)});
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(rng.truncated_normal(0.02, 2.0));
  return Tensor<Real>(std::move(shape), std::move(v), true);
}

template <class Real>
Tensor<Real> init_const(Shape shape, Real value) {
  return Tensor<Real>::full(std::move(shape), value, true);
}

template <class Real, class Other>
Tensor<Other> cast_tensor(const Tensor<Real>& t) {
  if (!t.defined()) return {};
  std::vector<Other> v(t.values().begin(), t.values().end());
  return Tensor<Other>(t.shape(), std::move(v), t.requires_grad());
}

}  // namespace detail

template <class Real>
template <class Other>
ModelParams<Other> ModelParams<Real>::cast() const {
  using detail::cast_tensor;
  ModelParams<Other> o;
  o.config = config;
  o.code_table = cast_tensor<Real, Other>(code_table);
  o.segment_table = cast_tensor<Real, Other>(segment_table);
  o.age_table = cast_tensor<Real, Other>(age_table);
  o.gender_table = cast_tensor<Real, Other>(gender_table);
  o.position_table = cast_tensor<Real, Other>(position_table);
  o.emb_ln_gain = cast_tensor<Real, Other>(emb_ln_gain);
  o.emb_ln_bias = cast_tensor<Real, Other>(emb_ln_bias);
  for (const auto& l : layers) {
    EncoderLayerParams<Other> m;
    m.wq = cast_tensor<Real, Other>(l.wq);
    m.bq = cast_tensor<Real, Other>(l.bq);
    m.wk = cast_tensor<Real, Other>(l.wk);
    m.bk = cast_tensor<Real, Other>(l.bk);
    m.wv = cast_tensor<Real, Other>(l.wv);
    m.bv = cast_tensor<Real, Other>(l.bv);
    m.wo = cast_tensor<Real, Other>(l.wo);
    m.bo = cast_tensor<Real, Other>(l.bo);
    m.ln1_gain = cast_tensor<Real, Other>(l.ln1_gain);
    m.ln1_bias = cast_tensor<Real, Other>(l.ln1_bias);
    m.ff1_w = cast_tensor<Real, Other>(l.ff1_w);
    m.ff1_b = cast_tensor<Real, Other>(l.ff1_b);
    m.ff2_w = cast_tensor<Real, Other>(l.ff2_w);
    m.ff2_b = cast_tensor<Real, Other>(l.ff2_b);
    m.ln2_gain = cast_tensor<Real, Other>(l.ln2_gain);
    m.ln2_bias = cast_tensor<Real, Other>(l.ln2_bias);
    o.layers.push_back(std::move(m));
  }
  o.mlm_decoder = cast_tensor<Real, Other>(mlm_decoder);
  o.mlm_bias = cast_tensor<Real, Other>(mlm_bias);
  o.cls_weight = cast_tensor<Real, Other>(cls_weight);
  o.cls_bias = cast_tensor<Real, Other>(cls_bias);
  return o;
}

// Fixed sinusoidal table: even dims sin(pos / 10000^(2i/H)), odd dims cos.
template <class Real>
Tensor<Real> sinusoidal_positions(std::size_t max_len, std::size_t hidden) {
  std::vector<Real> v(max_len * hidden);
  for (std::size_t pos = 0; pos < max_len; ++pos)
    for (std::size_t j = 0; j < hidden; ++j) {
      const double i2 = static_cast<double>(j - j % 2);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, i2 / static_cast<double>(hidden));
      v[pos * hidden + j] = static_cast<Real>(j % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return Tensor<Real>({max_len, hidden}, std::move(v), false);
}

// Attaches a freshly initialized classification head.
template <class Real>
void init_classifier(ModelParams<Real>& p, std::uint64_t seed) {
  p.cls_weight = detail::init_normal<Real>({p.config.hidden_size, 1}, seed, "classifier.w");
  p.cls_bias = detail::init_const<Real>({1}, Real(0));
}

// Weights ~ N(0, 0.02^2) truncated at two standard deviations; biases and
// layer-norm shifts 0; layer-norm gains 1. Each tensor draws from its own
// stream keyed by its name, so adding a head does not perturb the rest.
template <class Real>
ModelParams<Real> init_params(const ModelConfig& config, std::uint64_t seed, bool with_classifier = false) {
  config.validate();
  const std::size_t H = config.hidden_size, F = config.intermediate_size, V = config.vocab_size;
  using detail::init_const;
  using detail::init_normal;
  ModelParams<Real> p;
  p.config = config;
  p.code_table = init_normal<Real>({V, H}, seed, "embeddings.code");
  p.segment_table = init_normal<Real>({2, H}, seed, "embeddings.segment");
  p.age_table = init_normal<Real>({config.max_age + 1, H}, seed, "embeddings.age");
  p.gender_table = init_normal<Real>({2, H}, seed, "embeddings.gender");
  p.position_table = sinusoidal_positions<Real>(config.max_len, H);
  p.emb_ln_gain = init_const<Real>({H}, Real(1));
  p.emb_ln_bias = init_const<Real>({H}, Real(0));
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    const std::string n = "layer" + std::to_string(i) + ".";
    EncoderLayerParams<Real> l;
    l.wq = init_normal<Real>({H, H}, seed, n + "attn.q.w");
    l.bq = init_const<Real>({H}, Real(0));
    l.wk = init_normal<Real>({H, H}, seed, n + "attn.k.w");
    l.bk = init_const<Real>({H}, Real(0));
    l.wv = init_normal<Real>({H, H}, seed, n + "attn.v.w");
    l.bv = init_const<Real>({H}, Real(0));
    l.wo = init_normal<Real>({H, H}, seed, n + "attn.out.w");
    l.bo = init_const<Real>({H}, Real(0));
    l.ln1_gain = init_const<Real>({H}, Real(1));
    l.ln1_bias = init_const<Real>({H}, Real(0));
    l.ff1_w = init_normal<Real>({H, F}, seed, n + "ffn.in.w");
    l.ff1_b = init_const<Real>({F}, Real(0));
    l.ff2_w = init_normal<Real>({F, H}, seed, n + "ffn.out.w");
    l.ff2_b = init_const<Real>({H}, Real(0));
    l.ln2_gain = init_const<Real>({H}, Real(1));
    l.ln2_bias = init_const<Real>({H}, Real(0));
    p.layers.push_back(std::move(l));
  }
  if (!config.tie_mlm) p.mlm_decoder = init_normal<Real>({V, H}, seed, "mlm.decoder");
  p.mlm_bias = init_const<Real>({V}, Real(0));
  if (with_classifier) init_classifier(p, seed);
  return p;
}

// ---------------------------------------------------------------------------
// Forward pass

// Post-softmax attention weights of every layer and head for one sequence,
// stored as [layer][head][query][key].
struct AttentionMap {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t length = 0;
  std::vector<double> weights;
  std::vector<TokenId> token_ids;
  std::vector<std::string> tokens;  // filled by callers that hold a vocabulary

  double at(std::size_t layer, std::size_t head, std::size_t query, std::size_t key) const {
    return weights[((layer * n_heads + head) * length + query) * length + key];
  }
};

// Dropout is applied only when `train` is set; it then consumes `rng`.
struct ForwardMode {
  bool train = false;
  Rng* rng = nullptr;
  bool capture_attention = false;
};

template <class Real>
struct EncoderOutput {
  Tensor<Real> hidden;  // [L, hidden]
  AttentionMap attention;
};

namespace detail {

inline void check_train_rng(const ForwardMode& mode) {
  if (mode.train && !mode.rng) throw ContractError("train-mode forward needs a dropout RNG");
}

}  // namespace detail

// Sum of the five embeddings, before normalization.
template <class Real>
Tensor<Real> embedding_sum(const TokenSequence& seq, const ModelParams<Real>& p) {
  const auto L = seq.size();
  if (L > p.config.max_len)
    throw ShapeError("sequence of length " + std::to_string(L) + " exceeds max_len " +
                     std::to_string(p.config.max_len));
  std::vector<std::int32_t> ages(L), gender(L, seq.gender);
  const auto max_age = static_cast<std::int32_t>(p.config.max_age);
  for (std::size_t i = 0; i < L; ++i) ages[i] = std::clamp(seq.ages[i], 0, max_age);
  auto x = gather_rows(p.code_table, std::span<const std::int32_t>(seq.tokens));
  x = add(x, gather_rows(p.position_table, std::span<const std::int32_t>(seq.positions)));
  x = add(x, gather_rows(p.segment_table, std::span<const std::int32_t>(seq.segments)));
  x = add(x, gather_rows(p.age_table, std::span<const std::int32_t>(ages)));
  x = add(x, gather_rows(p.gender_table, std::span<const std::int32_t>(gender)));
  return x;
}

template <class Real>
Tensor<Real> embed(const TokenSequence& seq, const ModelParams<Real>& p, const ForwardMode& mode = {}) {
  detail::check_train_rng(mode);
  auto x = layer_norm(embedding_sum(seq, p), p.emb_ln_gain, p.emb_ln_bias);
  if (mode.train) x = dropout(x, p.config.dropout, *mode.rng, true);
  return x;
}

template <class Real>
EncoderOutput<Real> encode(const Tensor<Real>& hidden, std::span<const std::uint8_t> pad_mask,
                           const ModelParams<Real>& p, const ForwardMode& mode = {}) {
  detail::check_train_rng(mode);
  const auto& cfg = p.config;
  if (hidden.rank() != 2 || hidden.dim(1) != cfg.hidden_size)
    throw ShapeError("encoder input " + shape_str(hidden.shape()));
  const std::size_t L = hidden.dim(0);
  if (pad_mask.size() != L)
    throw ShapeError("pad mask of length " + std::to_string(pad_mask.size()) + " for sequence of length " +
                     std::to_string(L));
  const std::size_t heads = cfg.n_heads, d = cfg.hidden_size / heads;
  std::vector<Real> mask_values(L * L, Real(0));
  for (std::size_t q = 0; q < L; ++q)
    for (std::size_t k = 0; k < L; ++k)
      if (!pad_mask[k]) mask_values[q * L + k] = -std::numeric_limits<Real>::infinity();
  const Tensor<Real> key_mask({L, L}, std::move(mask_values));
  const Real inv_sqrt_d = Real(1) / std::sqrt(Real(d));

  EncoderOutput<Real> out;
  if (mode.capture_attention) {
    out.attention.n_layers = cfg.n_layers;
    out.attention.n_heads = heads;
    out.attention.length = L;
    out.attention.weights.reserve(cfg.n_layers * heads * L * L);
  }
  auto drop = [&](const Tensor<Real>& t) {
    return mode.train ? dropout(t, cfg.dropout, *mode.rng, true) : t;
  };
  Tensor<Real> x = hidden;
  for (const auto& layer : p.layers) {
    auto q = split_heads(add(matmul(x, layer.wq), layer.bq), heads);
    auto k = split_heads(add(matmul(x, layer.wk), layer.bk), heads);
    auto v = split_heads(add(matmul(x, layer.wv), layer.bv), heads);
    auto scores = add(scale(matmul(q, transpose(k)), inv_sqrt_d), key_mask);
    auto probs = softmax(scores);
    if (mode.capture_attention)
      out.attention.weights.insert(out.attention.weights.end(), probs.values().begin(), probs.values().end());
    auto context = merge_heads(matmul(drop(probs), v));
    auto attn_out = drop(add(matmul(context, layer.wo), layer.bo));
    x = layer_norm(add(x, attn_out), layer.ln1_gain, layer.ln1_bias);
    auto ff = gelu(add(matmul(x, layer.ff1_w), layer.ff1_b));
    ff = drop(add(matmul(ff, layer.ff2_w), layer.ff2_b));
    x = layer_norm(add(x, ff), layer.ln2_gain, layer.ln2_bias);
  }
  out.hidden = x;
  return out;
}

// Convenience: embed + encode.
template <class Real>
EncoderOutput<Real> forward(const TokenSequence& seq, const ModelParams<Real>& p, const ForwardMode& mode = {}) {
  auto out = encode(embed(seq, p, mode), std::span<const std::uint8_t>(seq.pad_mask), p, mode);
  out.attention.token_ids = seq.tokens;
  return out;
}

// [L, vocab] logits; the projection reuses the code table when tied.
template <class Real>
Tensor<Real> mlm_logits(const Tensor<Real>& hidden, const ModelParams<Real>& p) {
  const auto& decoder = p.config.tie_mlm ? p.code_table : p.mlm_decoder;
  return add(matmul(hidden, transpose(decoder)), p.mlm_bias);
}

// Logits for selected positions only.
template <class Real>
Tensor<Real> mlm_logits_at(const Tensor<Real>& hidden, const ModelParams<Real>& p,
                           std::span<const std::int32_t> positions) {
  return mlm_logits(gather_rows(hidden, positions), p);
}

// Raw classification logit from the CLS (position 0) state, shape [1].
template <class Real>
Tensor<Real> classify_logit(const Tensor<Real>& hidden, const ModelParams<Real>& p) {
  if (!p.has_classifier()) throw ContractError("model has no classification head");
  const std::int32_t zero = 0;
  auto cls = gather_rows(hidden, std::span<const std::int32_t>(&zero, 1));
  return reshape(add(matmul(cls, p.cls_weight), p.cls_bias), Shape{1});
}

template <class Real>
Real classify(const Tensor<Real>& hidden, const ModelParams<Real>& p) {
  return sigmoid(classify_logit(hidden, p)).item();
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (little-endian):
//   8 bytes   magic "BRLTMCKP"
//   u32       format version
//   u32 + n   model config, canonical JSON
//   u32 + n   vocabulary content hash (hex)
//   u32       tensor count
//   per tensor: u32 + n name, u32 rank, u32 dims..., f32 values

inline constexpr std::string_view kCheckpointMagic = "BRLTMCKP";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_str(std::string& out, std::string_view s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.append(s);
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw FormatError("checkpoint truncated");
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32() {
    auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[i])) << (8 * i);
    return v;
  }
  std::string str() { return std::string(take(u32())); }
  float f32() { return std::bit_cast<float>(u32()); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <class Real>
std::string serialize_checkpoint(const ModelParams<Real>& p, std::string_view vocab_hash) {
  std::string out(kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_str(out, to_json(p.config).dump());
  detail::put_str(out, vocab_hash);
  const auto params = p.named(false);
  detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& np : params) {
    detail::put_str(out, np.name);
    detail::put_u32(out, static_cast<std::uint32_t>(np.tensor.rank()));
    for (auto d : np.tensor.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (auto v : np.tensor.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

template <class Real>
void save_checkpoint(const ModelParams<Real>& p, std::string_view vocab_hash, const std::string& path) {
  write_file(path, serialize_checkpoint(p, vocab_hash));
}

template <class Real>
struct Checkpoint {
  ModelParams<Real> params;
  std::string vocab_hash;
};

// When `expected_vocab_hash` is given it must match. A checkpoint without a
// classification head gets one initialized from `classifier_seed` if given.
template <class Real>
Checkpoint<Real> parse_checkpoint(std::string_view bytes, std::optional<std::string_view> expected_vocab_hash = {},
                                  std::optional<std::uint64_t> classifier_seed = {}) {
  detail::Reader r(bytes);
  if (r.take(kCheckpointMagic.size()) != kCheckpointMagic) throw FormatError("not a checkpoint (bad magic)");
  if (const auto v = r.u32(); v != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(v));
  ModelConfig config;
  try {
    config = model_config_from_json(nlohmann::json::parse(r.str()));
    config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  Checkpoint<Real> ck;
  ck.vocab_hash = r.str();
  if (expected_vocab_hash && *expected_vocab_hash != ck.vocab_hash)
    throw IncompatibleError("checkpoint vocabulary hash " + ck.vocab_hash + " does not match " +
                            std::string(*expected_vocab_hash));

  // Template with the right names and shapes; values are overwritten below.
  const auto n = r.u32();
  auto params = init_params<Real>(config, 0, false);
  auto expected = params.named(false);
  const bool with_classifier = n == expected.size() + 2;
  if (with_classifier) {
    init_classifier(params, 0);
    expected = params.named(false);
  }
  if (n != expected.size())
    throw FormatError("checkpoint holds " + std::to_string(n) + " tensors, config implies " +
                      std::to_string(expected.size()));
  for (auto& np : expected) {
    if (const auto name = r.str(); name != np.name)
      throw FormatError("expected tensor '" + np.name + "', found '" + name + "'");
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    if (shape != np.tensor.shape())
      throw FormatError("tensor '" + np.name + "' has shape " + shape_str(shape) + ", expected " +
                        shape_str(np.tensor.shape()));
    for (auto& v : np.tensor.mutable_values()) v = static_cast<Real>(r.f32());
  }
  if (!r.done()) throw FormatError("trailing bytes after last tensor");
  if (!params.has_classifier() && classifier_seed) init_classifier(params, *classifier_seed);
  ck.params = std::move(params);
  return ck;
}

template <class Real>
Checkpoint<Real> load_checkpoint(const std::string& path, std::optional<std::string_view> expected_vocab_hash = {},
                                 std::optional<std::uint64_t> classifier_seed = {}) {
  return parse_checkpoint<Real>(read_file(path), expected_vocab_hash, classifier_seed);
}

}  // namespace brltm
