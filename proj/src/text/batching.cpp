#include "rtdlab/text/batching.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace rtdlab::text {

std::vector<double> TokenBatch::non_pad_weights() const {
  std::vector<double> w(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) w[i] = ids[i] == kPad ? 0.0 : 1.0;
  return w;
}

std::vector<bool> TokenBatch::pad_mask() const {
  std::vector<bool> m(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) m[i] = ids[i] == kPad;
  return m;
}

TokenBatch make_batch(const std::vector<TokenSequence>& sequences) {
  if (sequences.empty()) throw std::invalid_argument("make_batch: no sequences");
  TokenBatch batch;
  batch.batch_size = sequences.size();
  for (const auto& s : sequences) batch.seq_len = std::max(batch.seq_len, s.size());
  batch.ids.assign(batch.batch_size * batch.seq_len, kPad);
  for (std::size_t b = 0; b < sequences.size(); ++b) {
    std::copy(sequences[b].begin(), sequences[b].end(), batch.ids.begin() + static_cast<std::ptrdiff_t>(b * batch.seq_len));
  }
  return batch;
}

std::vector<TokenSequence> unbatch(const TokenBatch& batch) {
  std::vector<TokenSequence> out(batch.batch_size);
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    for (std::size_t s = 0; s < batch.seq_len && batch.at(b, s) != kPad; ++s) out[b].push_back(batch.at(b, s));
  }
  return out;
}

TokenSequence make_sequence(const Vocab& vocab, std::string_view text, std::size_t max_seq_len) {
  if (max_seq_len < 3) throw std::invalid_argument("make_sequence: max_seq_len must be at least 3");
  auto ids = vocab.encode(text);
  if (ids.size() > max_seq_len - 2) ids.resize(max_seq_len - 2);
  TokenSequence seq{kCls};
  seq.insert(seq.end(), ids.begin(), ids.end());
  seq.push_back(kSep);
  return seq;
}

std::vector<TokenSequence> pretraining_sequences(const Vocab& vocab, const std::vector<std::string>& lines,
                                                 std::size_t max_seq_len) {
  if (max_seq_len < 3) throw std::invalid_argument("pretraining_sequences: max_seq_len must be at least 3");
  const std::size_t body = max_seq_len - 2;
  std::vector<TokenSequence> out;
  for (const auto& line : lines) {
    const auto ids = vocab.encode(line);
    for (std::size_t start = 0; start < ids.size(); start += body) {
      const std::size_t end = std::min(ids.size(), start + body);
      TokenSequence seq{kCls};
      seq.insert(seq.end(), ids.begin() + static_cast<std::ptrdiff_t>(start), ids.begin() + static_cast<std::ptrdiff_t>(end));
      seq.push_back(kSep);
      out.push_back(std::move(seq));
    }
  }
  return out;
}

BatchStream::BatchStream(std::vector<TokenSequence> sequences, std::size_t batch_size, Rng rng)
    : sequences_(std::move(sequences)), batch_size_(batch_size), rng_(rng) {
  if (sequences_.empty()) throw std::invalid_argument("BatchStream: no sequences");
  if (batch_size_ == 0) throw std::invalid_argument("BatchStream: batch_size must be positive");
  reshuffle();
}

void BatchStream::reshuffle() {
  order_.resize(sequences_.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[uniform_below(rng_, i)]);
  cursor_ = 0;
}

TokenBatch BatchStream::next() {
  std::vector<TokenSequence> picked;
  picked.reserve(batch_size_);
  while (picked.size() < batch_size_) {
    if (cursor_ == order_.size()) {
      ++epoch_;
      reshuffle();
    }
    picked.push_back(sequences_[order_[cursor_++]]);
  }
  return make_batch(picked);
}

}  // namespace rtdlab::text
