#include "rtdlab/model/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rtdlab::model {

using ad::Tensor;

namespace {

constexpr double kMaskValue = -1e9;

std::string join_name(std::string_view prefix, std::string_view name) {
  return std::string(prefix) + "." + std::string(name);
}

template <typename T>
void push(ParamList<T>& out, std::string_view prefix, std::string_view name, const Tensor<T>& t) {
  if (t.defined()) out.push_back({join_name(prefix, name), t});
}

template <typename T>
Tensor<T> vector_param(std::size_t n, T value) {
  return Tensor<T>::full({n}, value, true);
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return ad::add(ad::matmul(x, w), b);
}

template <typename T>
Tensor<T> maybe_dropout(const Tensor<T>& x, double p, Rng* rng) {
  if (p <= 0.0 || !ad::is_training()) return x;
  if (rng == nullptr) throw std::invalid_argument("dropout is active but no dropout stream was given");
  return ad::dropout(x, p, *rng);
}

// (B,S,H) -> (B,heads,S,d)
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t batch, std::size_t seq, std::size_t heads, std::size_t d) {
  return ad::permute(ad::reshape(x, {batch, seq, heads, d}), {0, 2, 1, 3});
}

// (R,H) -> (heads,R,d)
template <typename T>
Tensor<T> split_heads_rel(const Tensor<T>& x, std::size_t rows, std::size_t heads, std::size_t d) {
  return ad::permute(ad::reshape(x, {rows, heads, d}), {1, 0, 2});
}

// Scores of every (B,heads,S,d) row against every relative-position row:
// (B,heads,S,d) x (heads,R,d) -> (B,heads,S,R).
template <typename T>
Tensor<T> against_positions(const Tensor<T>& x, const Tensor<T>& rel) {
  return ad::matmul(x, ad::transpose(rel));
}

}  // namespace

std::string_view to_string(AttentionMode mode) {
  return mode == AttentionMode::kStandard ? "standard" : "disentangled";
}

AttentionMode parse_attention_mode(std::string_view text) {
  if (text == "standard") return AttentionMode::kStandard;
  if (text == "disentangled") return AttentionMode::kDisentangled;
  throw std::invalid_argument("attention mode must be 'standard' or 'disentangled', got '" + std::string(text) + "'");
}

void EncoderConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument(msg); };
  if (hidden == 0) fail("hidden must be positive");
  if (n_heads == 0) fail("n_heads must be positive");
  if (hidden % n_heads != 0) {
    fail("hidden (" + std::to_string(hidden) + ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
  }
  if (ffn_inner < hidden) fail("ffn_inner must be at least hidden");
  if (max_rel_distance == 0) fail("max_rel_distance must be positive");
  if (max_seq_len < 3) fail("max_seq_len must be at least 3");
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
}

void validate_generator_shape(const EncoderConfig& generator, const EncoderConfig& discriminator,
                              bool allow_override) {
  generator.validate();
  discriminator.validate();
  if (allow_override) return;
  const std::size_t want = (discriminator.n_layers + 1) / 2;
  if (generator.n_layers != want) {
    throw std::invalid_argument("generator n_layers must be ceil(discriminator n_layers / 2) = " +
                                std::to_string(want) + ", got " + std::to_string(generator.n_layers));
  }
  if (generator.hidden != discriminator.hidden) {
    throw std::invalid_argument("generator hidden must equal discriminator hidden");
  }
}

template <typename T>
ParamList<T> EncoderParams<T>::named(std::string_view prefix) const {
  ParamList<T> out;
  push(out, prefix, "abs_pos", abs_pos);
  push(out, prefix, "rel_pos", rel_pos);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = join_name(prefix, "layer" + std::to_string(i));
    push(out, p, "ln1_g", l.ln1_g);
    push(out, p, "ln1_b", l.ln1_b);
    push(out, p, "wq", l.wq);
    push(out, p, "bq", l.bq);
    push(out, p, "wk", l.wk);
    push(out, p, "bk", l.bk);
    push(out, p, "wv", l.wv);
    push(out, p, "bv", l.bv);
    push(out, p, "wo", l.wo);
    push(out, p, "bo", l.bo);
    push(out, p, "wq_rel", l.wq_rel);
    push(out, p, "wk_rel", l.wk_rel);
    push(out, p, "ln2_g", l.ln2_g);
    push(out, p, "ln2_b", l.ln2_b);
    push(out, p, "w1", l.w1);
    push(out, p, "b1", l.b1);
    push(out, p, "w2", l.w2);
    push(out, p, "b2", l.b2);
  }
  push(out, prefix, "final_ln_g", final_ln_g);
  push(out, prefix, "final_ln_b", final_ln_b);
  return out;
}

template <typename T>
ParamList<T> MlmHead<T>::named(std::string_view prefix) const {
  ParamList<T> out;
  push(out, prefix, "dense_w", dense_w);
  push(out, prefix, "dense_b", dense_b);
  push(out, prefix, "ln_g", ln_g);
  push(out, prefix, "ln_b", ln_b);
  push(out, prefix, "bias", bias);
  push(out, prefix, "output", output);
  return out;
}

template <typename T>
ParamList<T> RtdHead<T>::named(std::string_view prefix) const {
  ParamList<T> out;
  push(out, prefix, "dense_w", dense_w);
  push(out, prefix, "dense_b", dense_b);
  push(out, prefix, "out_w", out_w);
  push(out, prefix, "out_b", out_b);
  return out;
}

template <typename T>
ParamList<T> ClassifierHead<T>::named(std::string_view prefix) const {
  ParamList<T> out;
  push(out, prefix, "w", w);
  push(out, prefix, "b", b);
  return out;
}

template <typename T>
Tensor<T> init_matrix(std::size_t rows, std::size_t cols, double init_std, Rng& rng) {
  std::vector<T> v(rows * cols);
  for (auto& x : v) x = static_cast<T>(normal(rng, 0.0, init_std));
  return Tensor<T>({rows, cols}, std::move(v), true);
}

template <typename T>
EncoderParams<T> init_encoder(const EncoderConfig& config, Rng& rng, double init_std) {
  config.validate();
  const std::size_t h = config.hidden;
  EncoderParams<T> p;
  p.abs_pos = init_matrix<T>(config.max_seq_len, h, init_std, rng);
  if (config.attention_mode == AttentionMode::kDisentangled) {
    p.rel_pos = init_matrix<T>(config.rel_rows(), h, init_std, rng);
  }
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    LayerParams<T> l;
    l.ln1_g = vector_param<T>(h, T(1));
    l.ln1_b = vector_param<T>(h, T(0));
    l.wq = init_matrix<T>(h, h, init_std, rng);
    l.bq = vector_param<T>(h, T(0));
    l.wk = init_matrix<T>(h, h, init_std, rng);
    l.bk = vector_param<T>(h, T(0));
    l.wv = init_matrix<T>(h, h, init_std, rng);
    l.bv = vector_param<T>(h, T(0));
    l.wo = init_matrix<T>(h, h, init_std, rng);
    l.bo = vector_param<T>(h, T(0));
    if (config.attention_mode == AttentionMode::kDisentangled) {
      l.wq_rel = init_matrix<T>(h, h, init_std, rng);
      l.wk_rel = init_matrix<T>(h, h, init_std, rng);
    }
    l.ln2_g = vector_param<T>(h, T(1));
    l.ln2_b = vector_param<T>(h, T(0));
    l.w1 = init_matrix<T>(h, config.ffn_inner, init_std, rng);
    l.b1 = vector_param<T>(config.ffn_inner, T(0));
    l.w2 = init_matrix<T>(config.ffn_inner, h, init_std, rng);
    l.b2 = vector_param<T>(h, T(0));
    p.layers.push_back(std::move(l));
  }
  if (config.n_layers > 0) {
    p.final_ln_g = vector_param<T>(h, T(1));
    p.final_ln_b = vector_param<T>(h, T(0));
  }
  return p;
}

template <typename T>
MlmHead<T> init_mlm_head(std::size_t hidden, std::size_t vocab_size, bool tied, Rng& rng, double init_std) {
  MlmHead<T> head;
  head.dense_w = init_matrix<T>(hidden, hidden, init_std, rng);
  head.dense_b = vector_param<T>(hidden, T(0));
  head.ln_g = vector_param<T>(hidden, T(1));
  head.ln_b = vector_param<T>(hidden, T(0));
  head.bias = vector_param<T>(vocab_size, T(0));
  if (!tied) head.output = init_matrix<T>(vocab_size, hidden, init_std, rng);
  return head;
}

template <typename T>
RtdHead<T> init_rtd_head(std::size_t hidden, Rng& rng, double init_std) {
  RtdHead<T> head;
  head.dense_w = init_matrix<T>(hidden, hidden, init_std, rng);
  head.dense_b = vector_param<T>(hidden, T(0));
  head.out_w = init_matrix<T>(hidden, 1, init_std, rng);
  head.out_b = vector_param<T>(1, T(0));
  return head;
}

template <typename T>
ClassifierHead<T> init_classifier_head(std::size_t hidden, std::size_t n_classes, Rng& rng, double init_std) {
  ClassifierHead<T> head;
  head.w = init_matrix<T>(hidden, n_classes, init_std, rng);
  head.b = vector_param<T>(n_classes, T(0));
  return head;
}

std::size_t relative_bucket(std::ptrdiff_t query, std::ptrdiff_t key, std::size_t max_rel_distance) {
  const auto k = static_cast<std::ptrdiff_t>(max_rel_distance);
  const std::ptrdiff_t d = std::clamp(query - key, -(k - 1), k - 1);
  return static_cast<std::size_t>(d + k - 1);
}

template <typename T>
ForwardContext<T> make_context(const text::TokenBatch& batch, const EncoderConfig& config, Rng* dropout_rng) {
  const std::size_t B = batch.batch_size;
  const std::size_t S = batch.seq_len;
  if (S > config.max_seq_len) {
    throw std::invalid_argument("sequence length " + std::to_string(S) + " exceeds max_seq_len " +
                                std::to_string(config.max_seq_len));
  }
  ForwardContext<T> ctx;
  ctx.seq_len = S;
  ctx.dropout_rng = dropout_rng;
  std::vector<T> bias(B * S, T(0));
  for (std::size_t i = 0; i < B * S; ++i) {
    if (batch.ids[i] == text::kPad) bias[i] = static_cast<T>(kMaskValue);
  }
  ctx.mask_bias = Tensor<T>({B, 1, 1, S}, std::move(bias));
  if (config.attention_mode == AttentionMode::kDisentangled) {
    ctx.c2p_index.resize(S * S);
    ctx.p2c_index.resize(S * S);
    for (std::size_t i = 0; i < S; ++i) {
      for (std::size_t j = 0; j < S; ++j) {
        const auto qi = static_cast<std::ptrdiff_t>(i);
        const auto kj = static_cast<std::ptrdiff_t>(j);
        ctx.c2p_index[i * S + j] = static_cast<ad::Index>(relative_bucket(qi, kj, config.max_rel_distance));
        ctx.p2c_index[i * S + j] = static_cast<ad::Index>(relative_bucket(qi, kj, config.max_rel_distance));
      }
    }
  }
  return ctx;
}

template <typename T>
Tensor<T> embed(const text::TokenBatch& batch, const Tensor<T>& table) {
  return ad::embedding(table, std::span<const ad::Index>(batch.ids), {batch.batch_size, batch.seq_len});
}

template <typename T>
Tensor<T> embed_inputs(const text::TokenBatch& batch, const Tensor<T>& table, const EncoderParams<T>& params) {
  auto tokens = embed(batch, table);
  if (!params.abs_pos.defined()) return tokens;
  return ad::add(tokens, ad::slice(params.abs_pos, 0, 0, batch.seq_len));
}

template <typename T>
Tensor<T> attention_forward(const Tensor<T>& h, const LayerParams<T>& layer, const EncoderParams<T>& params,
                            const EncoderConfig& config, const ForwardContext<T>& ctx) {
  if (h.rank() != 3 || h.dim(2) != config.hidden) {
    throw ad::ShapeError("attention", "expected (B,S," + std::to_string(config.hidden) + "), got " +
                                          ad::shape_str(h.shape()));
  }
  const std::size_t B = h.dim(0), S = h.dim(1);
  const std::size_t heads = config.n_heads, d = config.head_dim();
  if (ctx.mask_bias.defined() && ctx.mask_bias.shape() != ad::Shape{B, 1, 1, S}) {
    throw ad::ShapeError("attention", "mask bias " + ad::shape_str(ctx.mask_bias.shape()) +
                                          " does not match input " + ad::shape_str(h.shape()));
  }
  auto q = split_heads(linear(h, layer.wq, layer.bq), B, S, heads, d);
  auto k = split_heads(linear(h, layer.wk, layer.bk), B, S, heads, d);
  auto v = split_heads(linear(h, layer.wv, layer.bv), B, S, heads, d);

  auto scores = ad::matmul(q, ad::transpose(k));  // (B,heads,S,S)
  double scale_factor = 1.0 / std::sqrt(static_cast<double>(d));
  if (config.attention_mode == AttentionMode::kDisentangled) {
    if (ctx.c2p_index.size() != S * S) {
      throw ad::ShapeError("attention", "relative index tables built for a different sequence length");
    }
    const std::size_t R = config.rel_rows();
    auto kr = split_heads_rel(ad::matmul(params.rel_pos, layer.wk_rel), R, heads, d);
    auto qr = split_heads_rel(ad::matmul(params.rel_pos, layer.wq_rel), R, heads, d);
    auto c2p = ad::take_along_last(against_positions(q, kr),
                                   std::span<const ad::Index>(ctx.c2p_index), S);
    auto p2c = ad::transpose(ad::take_along_last(against_positions(k, qr),
                                                 std::span<const ad::Index>(ctx.p2c_index), S));
    scores = ad::add(ad::add(scores, c2p), p2c);
    scale_factor = 1.0 / std::sqrt(3.0 * static_cast<double>(d));
  }
  if (ctx.score_scale) scale_factor = *ctx.score_scale;
  scores = ad::scale(scores, static_cast<T>(scale_factor));
  if (ctx.mask_bias.defined()) scores = ad::add(scores, ctx.mask_bias);
  auto probs = maybe_dropout(ad::softmax(scores), config.dropout, ctx.dropout_rng);
  auto mixed = ad::matmul(probs, v);  // (B,heads,S,d)
  auto merged = ad::reshape(ad::permute(mixed, {0, 2, 1, 3}), {B, S, config.hidden});
  return linear(merged, layer.wo, layer.bo);
}

template <typename T>
Tensor<T> encoder_forward(const Tensor<T>& x, const EncoderParams<T>& params, const EncoderConfig& config,
                          const ForwardContext<T>& ctx) {
  if (params.layers.size() != config.n_layers) {
    throw ad::ShapeError("encoder", "config has " + std::to_string(config.n_layers) + " layers, params have " +
                                        std::to_string(params.layers.size()));
  }
  Tensor<T> h = x;
  for (const auto& layer : params.layers) {
    auto attn = attention_forward(ad::layer_norm(h, layer.ln1_g, layer.ln1_b), layer, params, config, ctx);
    h = ad::add(h, maybe_dropout(attn, config.dropout, ctx.dropout_rng));
    auto inner = ad::gelu(linear(ad::layer_norm(h, layer.ln2_g, layer.ln2_b), layer.w1, layer.b1));
    h = ad::add(h, maybe_dropout(linear(inner, layer.w2, layer.b2), config.dropout, ctx.dropout_rng));
  }
  if (!params.layers.empty()) h = ad::layer_norm(h, params.final_ln_g, params.final_ln_b);
  return h;
}

namespace {

template <typename T>
Tensor<T> mlm_project(const Tensor<T>& x, const Tensor<T>& table, const MlmHead<T>& head) {
  const auto& out = head.output.defined() ? head.output : table;
  if (out.rank() != 2 || out.dim(1) != x.shape().back()) {
    throw ad::ShapeError("mlm_head", "hidden " + ad::shape_str(x.shape()) + " vs embedding " +
                                         ad::shape_str(out.shape()));
  }
  auto t = ad::layer_norm(ad::gelu(linear(x, head.dense_w, head.dense_b)), head.ln_g, head.ln_b);
  return ad::add(ad::matmul(t, ad::transpose(out)), head.bias);
}

}  // namespace

template <typename T>
Tensor<T> mlm_head(const Tensor<T>& h, const Tensor<T>& table, const MlmHead<T>& head) {
  return mlm_project(h, table, head);
}

template <typename T>
Tensor<T> mlm_head_at(const Tensor<T>& h, std::span<const std::size_t> flat_positions, const Tensor<T>& table,
                      const MlmHead<T>& head) {
  if (h.rank() != 3) throw ad::ShapeError("mlm_head", "expected (B,S,H), got " + ad::shape_str(h.shape()));
  const std::size_t rows = h.dim(0) * h.dim(1);
  std::vector<ad::Index> idx(flat_positions.begin(), flat_positions.end());
  auto flat = ad::reshape(h, {rows, h.dim(2)});
  auto picked = ad::embedding(flat, std::span<const ad::Index>(idx), {idx.size()});
  return mlm_project(picked, table, head);
}

template <typename T>
Tensor<T> rtd_head(const Tensor<T>& h, const RtdHead<T>& head) {
  if (h.rank() != 3 || h.dim(2) != head.dense_w.dim(0)) {
    throw ad::ShapeError("rtd_head", "hidden " + ad::shape_str(h.shape()) + " vs dense " +
                                         ad::shape_str(head.dense_w.shape()));
  }
  auto t = ad::gelu(linear(h, head.dense_w, head.dense_b));
  auto logits = linear(t, head.out_w, head.out_b);  // (B,S,1)
  return ad::reshape(logits, {h.dim(0), h.dim(1)});
}

template <typename T>
Tensor<T> classifier_head(const Tensor<T>& h, const ClassifierHead<T>& head, double dropout, Rng* dropout_rng) {
  if (h.rank() != 3) throw ad::ShapeError("classifier_head", "expected (B,S,H), got " + ad::shape_str(h.shape()));
  auto cls = ad::reshape(ad::slice(h, 1, 0, 1), {h.dim(0), h.dim(2)});
  return linear(maybe_dropout(cls, dropout, dropout_rng), head.w, head.b);
}

#define RTDLAB_INSTANTIATE_ENCODER(T)                                                                        \
  template struct EncoderParams<T>;                                                                          \
  template struct MlmHead<T>;                                                                                \
  template struct RtdHead<T>;                                                                                \
  template struct ClassifierHead<T>;                                                                         \
  template Tensor<T> init_matrix<T>(std::size_t, std::size_t, double, Rng&);                                 \
  template EncoderParams<T> init_encoder<T>(const EncoderConfig&, Rng&, double);                             \
  template MlmHead<T> init_mlm_head<T>(std::size_t, std::size_t, bool, Rng&, double);                        \
  template RtdHead<T> init_rtd_head<T>(std::size_t, Rng&, double);                                           \
  template ClassifierHead<T> init_classifier_head<T>(std::size_t, std::size_t, Rng&, double);                \
  template ForwardContext<T> make_context<T>(const text::TokenBatch&, const EncoderConfig&, Rng*);           \
  template Tensor<T> embed(const text::TokenBatch&, const Tensor<T>&);                                       \
  template Tensor<T> embed_inputs(const text::TokenBatch&, const Tensor<T>&, const EncoderParams<T>&);       \
  template Tensor<T> attention_forward(const Tensor<T>&, const LayerParams<T>&, const EncoderParams<T>&,     \
                                       const EncoderConfig&, const ForwardContext<T>&);                      \
  template Tensor<T> encoder_forward(const Tensor<T>&, const EncoderParams<T>&, const EncoderConfig&,        \
                                     const ForwardContext<T>&);                                              \
  template Tensor<T> mlm_head(const Tensor<T>&, const Tensor<T>&, const MlmHead<T>&);                        \
  template Tensor<T> mlm_head_at(const Tensor<T>&, std::span<const std::size_t>, const Tensor<T>&,           \
                                 const MlmHead<T>&);                                                         \
  template Tensor<T> rtd_head(const Tensor<T>&, const RtdHead<T>&);                                          \
  template Tensor<T> classifier_head(const Tensor<T>&, const ClassifierHead<T>&, double, Rng*);

RTDLAB_INSTANTIATE_ENCODER(float)
RTDLAB_INSTANTIATE_ENCODER(double)

#undef RTDLAB_INSTANTIATE_ENCODER

}  // namespace rtdlab::model
