// Transformer encoder with standard or disentangled self-attention, the
// token embedding lookup, and the MLM / RTD / classification heads.
//
// Blocks are pre-layer-norm: h += Attn(LN(h)); h += FFN(LN(h)), followed by
// a final layer norm when there is at least one block. Absolute position
// embeddings are added to the token embeddings at the input.
//
// Disentangled attention scores query i against key j as
//
//   s(i,j) = q_i . k_j  +  q_i . kr[d(i,j)]  +  k_j . qr[d(j,i)]
//
// scaled by 1/sqrt(3 * head_dim), where q, k are content projections,
// kr = P W_kr and qr = P W_qr project a relative-position table P shared by
// all blocks of the encoder, and d(i,j) = clamp(i - j, -(K-1), K-1) + K - 1
// indexes P's 2K-1 rows for K = max_rel_distance. Values use content only.

#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rtdlab/autodiff/ops.hpp"
#include "rtdlab/model/params.hpp"
#include "rtdlab/text/batching.hpp"
#include "rtdlab/util/rng.hpp"

namespace rtdlab::model {

enum class AttentionMode { kStandard, kDisentangled };

std::string_view to_string(AttentionMode mode);
AttentionMode parse_attention_mode(std::string_view text);

struct EncoderConfig {
  std::size_t n_layers = 2;
  std::size_t hidden = 64;
  std::size_t n_heads = 4;
  std::size_t ffn_inner = 256;
  std::size_t max_rel_distance = 32;
  std::size_t max_seq_len = 64;
  AttentionMode attention_mode = AttentionMode::kDisentangled;
  double dropout = 0.0;

  std::size_t head_dim() const { return hidden / n_heads; }
  std::size_t rel_rows() const { return 2 * max_rel_distance - 1; }
  // Throws std::invalid_argument naming the offending field.
  void validate() const;

  bool operator==(const EncoderConfig&) const = default;
};

// Generator depth must be ceil(discriminator depth / 2) at equal width
// unless `allow_override` is set.
void validate_generator_shape(const EncoderConfig& generator, const EncoderConfig& discriminator,
                              bool allow_override);

template <typename T>
struct LayerParams {
  ad::Tensor<T> ln1_g, ln1_b;
  ad::Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  ad::Tensor<T> wq_rel, wk_rel;  // disentangled mode only
  ad::Tensor<T> ln2_g, ln2_b;
  ad::Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct EncoderParams {
  ad::Tensor<T> abs_pos;  // (max_seq_len, hidden)
  ad::Tensor<T> rel_pos;  // (2K-1, hidden), disentangled mode only
  std::vector<LayerParams<T>> layers;
  ad::Tensor<T> final_ln_g, final_ln_b;  // present when n_layers > 0

  ParamList<T> named(std::string_view prefix) const;
};

template <typename T>
struct MlmHead {
  ad::Tensor<T> dense_w, dense_b, ln_g, ln_b;
  ad::Tensor<T> bias;    // (V)
  ad::Tensor<T> output;  // (V, hidden) when untied from the input embeddings

  ParamList<T> named(std::string_view prefix) const;
};

template <typename T>
struct RtdHead {
  ad::Tensor<T> dense_w, dense_b, out_w, out_b;

  ParamList<T> named(std::string_view prefix) const;
};

template <typename T>
struct ClassifierHead {
  ad::Tensor<T> w, b;  // (hidden, n_classes), (n_classes)

  ParamList<T> named(std::string_view prefix) const;
};

// Weights ~ N(0, init_std), biases 0, layer-norm gains 1.
template <typename T>
ad::Tensor<T> init_matrix(std::size_t rows, std::size_t cols, double init_std, Rng& rng);
template <typename T>
EncoderParams<T> init_encoder(const EncoderConfig& config, Rng& rng, double init_std = 0.02);
template <typename T>
MlmHead<T> init_mlm_head(std::size_t hidden, std::size_t vocab_size, bool tied, Rng& rng, double init_std = 0.02);
template <typename T>
RtdHead<T> init_rtd_head(std::size_t hidden, Rng& rng, double init_std = 0.02);
template <typename T>
ClassifierHead<T> init_classifier_head(std::size_t hidden, std::size_t n_classes, Rng& rng, double init_std = 0.02);

// Per-forward inputs that are not parameters.
template <typename T>
struct ForwardContext {
  ad::Tensor<T> mask_bias;  // (B,1,1,S): 0 for real keys, large negative for padding
  std::vector<ad::Index> c2p_index;  // (S x S) relative-position rows for content->position
  std::vector<ad::Index> p2c_index;  // (S x S) for position->content, keyed [j][i]
  std::size_t seq_len = 0;
  Rng* dropout_rng = nullptr;        // required only when dropout is active
  std::optional<double> score_scale; // overrides the mode's default scaling
};

template <typename T>
ForwardContext<T> make_context(const text::TokenBatch& batch, const EncoderConfig& config,
                               Rng* dropout_rng = nullptr);

// Row k of the relative-position table for query i / key j.
std::size_t relative_bucket(std::ptrdiff_t query, std::ptrdiff_t key, std::size_t max_rel_distance);

// (B,S) ids -> (B,S,hidden) rows of `table`.
template <typename T>
ad::Tensor<T> embed(const text::TokenBatch& batch, const ad::Tensor<T>& table);

// Token rows plus absolute position rows.
template <typename T>
ad::Tensor<T> embed_inputs(const text::TokenBatch& batch, const ad::Tensor<T>& table,
                           const EncoderParams<T>& params);

template <typename T>
ad::Tensor<T> attention_forward(const ad::Tensor<T>& h, const LayerParams<T>& layer,
                                const EncoderParams<T>& params, const EncoderConfig& config,
                                const ForwardContext<T>& ctx);

template <typename T>
ad::Tensor<T> encoder_forward(const ad::Tensor<T>& x, const EncoderParams<T>& params,
                              const EncoderConfig& config, const ForwardContext<T>& ctx);

// (B,S,hidden) -> (B,S,V). `table` is the tied output projection; ignored
// when the head carries its own.
template <typename T>
ad::Tensor<T> mlm_head(const ad::Tensor<T>& h, const ad::Tensor<T>& table, const MlmHead<T>& head);

// MLM logits only at flat positions b*S+s: (N, V).
template <typename T>
ad::Tensor<T> mlm_head_at(const ad::Tensor<T>& h, std::span<const std::size_t> flat_positions,
                          const ad::Tensor<T>& table, const MlmHead<T>& head);

// (B,S,hidden) -> (B,S); positive logit means "original".
template <typename T>
ad::Tensor<T> rtd_head(const ad::Tensor<T>& h, const RtdHead<T>& head);

// Linear head over the [CLS] state of each sequence: (B, n_classes).
template <typename T>
ad::Tensor<T> classifier_head(const ad::Tensor<T>& h, const ClassifierHead<T>& head, double dropout,
                              Rng* dropout_rng);

}  // namespace rtdlab::model
