// Generator and discriminator objectives and the sampling step between them.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "rtdlab/rtd/bundle.hpp"
#include "rtdlab/text/masking.hpp"

namespace rtdlab::rtd {

// Mean over masked positions of -log softmax(logits)[target]. Accepts either
// full (B,S,V) logits or (N,V) rows already aligned with
// batch.flat_positions. Throws std::invalid_argument when nothing is masked.
template <typename T>
ad::Tensor<T> mlm_loss(const ad::Tensor<T>& logits, const text::MaskedBatch& batch);

// Copies batch.original and overwrites every masked position with a draw
// from softmax(row / temperature). `logits` holds one row of V values per
// masked position in flat_positions order, or full (B,S,V) logits. Values
// are read directly, so nothing flows back to the generator. Exactly one
// uniform is consumed per masked position.
template <typename T>
text::TokenBatch sample_replacements(const ad::Tensor<T>& logits, const text::MaskedBatch& batch,
                                     double temperature, Rng& rng);

// 1 ("original") where x_tilde equals the original id, else 0.
std::vector<double> rtd_labels(const text::MaskedBatch& batch, const text::TokenBatch& x_tilde);

// Binary cross-entropy with logits averaged over non-pad positions.
template <typename T>
ad::Tensor<T> rtd_loss(const ad::Tensor<T>& logits, std::span<const double> labels,
                       std::span<const double> non_pad_weights);

// Generator pass on the corrupted input: MLM logits at masked positions (N,V).
template <typename T>
ad::Tensor<T> generator_logits(const ModelBundle<T>& bundle, const text::MaskedBatch& batch, Rng* dropout_rng);

// Discriminator pass on x_tilde using `table` as token embeddings; padding
// follows batch.original. Returns (B,S) logits.
template <typename T>
ad::Tensor<T> discriminator_logits(const ModelBundle<T>& bundle, const ad::Tensor<T>& table,
                                   const text::MaskedBatch& batch, const text::TokenBatch& x_tilde,
                                   Rng* dropout_rng);

}  // namespace rtdlab::rtd
