// BERT-style corruption of token batches for the generator input.

#pragma once

#include <cstddef>
#include <vector>

#include "rtdlab/text/batching.hpp"
#include "rtdlab/util/rng.hpp"

namespace rtdlab::text {

// Fate of each selected position; the three probabilities must sum to 1.
struct MaskingRule {
  double p_mask = 0.8;
  double p_random = 0.1;
  double p_keep = 0.1;
};

struct MaskingConfig {
  double mask_rate = 0.15;
  MaskingRule rule;
  // At least one selected position per sequence.
  bool min_one = true;
};

struct MaskedBatch {
  TokenBatch original;   // X
  TokenBatch corrupted;  // generator input
  // Selected positions per sequence, ascending. A selected position may still
  // hold its original id (keep rule, or a random draw of the same id).
  std::vector<std::vector<std::size_t>> masked_positions;
  // b * seq_len + s for every selected position, sequence-major.
  std::vector<std::size_t> flat_positions;
  // Original ids at flat_positions.
  std::vector<TokenId> targets;

  std::size_t num_masked() const { return flat_positions.size(); }
};

// Special ids ([PAD] [UNK] [CLS] [SEP] [MASK]) are never selected and never
// used as random replacements. Each sequence selects
// round(mask_rate * eligible) positions uniformly without replacement.
// Throws std::invalid_argument on an inconsistent rule and
// std::runtime_error when a sequence has nothing eligible to select.
MaskedBatch mask_tokens(const TokenBatch& batch, const MaskingConfig& config, std::size_t vocab_size, Rng& rng);

// Rebuilds the per-sequence sets and flat positions from a selection.
MaskedBatch masked_batch_from_positions(const TokenBatch& original, const TokenBatch& corrupted,
                                        std::vector<std::vector<std::size_t>> positions);

}  // namespace rtdlab::text
