// Token sequences, padded batches and a deterministic batch stream.

#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "rtdlab/text/vocab.hpp"
#include "rtdlab/util/rng.hpp"

namespace rtdlab::text {

using TokenSequence = std::vector<TokenId>;

// Row-major (batch_size x seq_len) ids, right-padded with kPad.
struct TokenBatch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<TokenId> ids;

  TokenId at(std::size_t b, std::size_t s) const { return ids[b * seq_len + s]; }
  TokenId& at(std::size_t b, std::size_t s) { return ids[b * seq_len + s]; }
  // 1 for real tokens, 0 for padding; one entry per position.
  std::vector<double> non_pad_weights() const;
  // 0 for real tokens, 1 for padding; one entry per position.
  std::vector<bool> pad_mask() const;
};

// Pads to the longest sequence. Throws on an empty list.
TokenBatch make_batch(const std::vector<TokenSequence>& sequences);
std::vector<TokenSequence> unbatch(const TokenBatch& batch);

// [CLS] pieces [SEP], truncated to max_seq_len.
TokenSequence make_sequence(const Vocab& vocab, std::string_view text, std::size_t max_seq_len);

// One sequence per line; lines longer than max_seq_len - 2 pieces are split
// into consecutive chunks, each wrapped in [CLS] ... [SEP].
std::vector<TokenSequence> pretraining_sequences(const Vocab& vocab, const std::vector<std::string>& lines,
                                                 std::size_t max_seq_len);

// Cycles through sequences in epoch order; each epoch is a fresh
// permutation drawn from the stream's own generator.
class BatchStream {
 public:
  BatchStream(std::vector<TokenSequence> sequences, std::size_t batch_size, Rng rng);
  TokenBatch next();
  std::size_t epoch() const { return epoch_; }

 private:
  void reshuffle();

  std::vector<TokenSequence> sequences_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

}  // namespace rtdlab::text
