#include "rtdlab/text/masking.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace rtdlab::text {

MaskedBatch masked_batch_from_positions(const TokenBatch& original, const TokenBatch& corrupted,
                                        std::vector<std::vector<std::size_t>> positions) {
  MaskedBatch out;
  out.original = original;
  out.corrupted = corrupted;
  out.masked_positions = std::move(positions);
  for (std::size_t b = 0; b < out.masked_positions.size(); ++b) {
    for (auto s : out.masked_positions[b]) {
      out.flat_positions.push_back(b * original.seq_len + s);
      out.targets.push_back(original.at(b, s));
    }
  }
  return out;
}

MaskedBatch mask_tokens(const TokenBatch& batch, const MaskingConfig& config, std::size_t vocab_size, Rng& rng) {
  const auto& r = config.rule;
  if (r.p_mask < 0 || r.p_random < 0 || r.p_keep < 0 ||
      std::abs(r.p_mask + r.p_random + r.p_keep - 1.0) > 1e-9) {
    throw std::invalid_argument("mask_tokens: p_mask + p_random + p_keep must equal 1");
  }
  if (config.mask_rate < 0.0 || config.mask_rate > 1.0) {
    throw std::invalid_argument("mask_tokens: mask_rate must lie in [0, 1]");
  }
  if (r.p_random > 0 && vocab_size <= static_cast<std::size_t>(kNumSpecial)) {
    throw std::invalid_argument("mask_tokens: random replacement needs non-special vocabulary");
  }
  TokenBatch corrupted = batch;
  std::vector<std::vector<std::size_t>> positions(batch.batch_size);
  const std::size_t pool = vocab_size - static_cast<std::size_t>(kNumSpecial);
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    std::vector<std::size_t> eligible;
    for (std::size_t s = 0; s < batch.seq_len; ++s) {
      if (!Vocab::is_special(batch.at(b, s))) eligible.push_back(s);
    }
    auto count = static_cast<std::size_t>(std::llround(config.mask_rate * static_cast<double>(eligible.size())));
    if (config.min_one) count = std::max<std::size_t>(count, 1);
    if (count > 0 && eligible.empty()) {
      throw std::runtime_error("mask_tokens: sequence " + std::to_string(b) + " has no maskable position");
    }
    count = std::min(count, eligible.size());
    for (std::size_t i = 0; i < count; ++i) {
      std::swap(eligible[i], eligible[i + uniform_below(rng, eligible.size() - i)]);
    }
    positions[b].assign(eligible.begin(), eligible.begin() + static_cast<std::ptrdiff_t>(count));
    std::sort(positions[b].begin(), positions[b].end());
    for (auto s : positions[b]) {
      const double u = uniform01(rng);
      if (u < r.p_mask) {
        corrupted.at(b, s) = kMask;
      } else if (u < r.p_mask + r.p_random) {
        corrupted.at(b, s) = kNumSpecial + static_cast<TokenId>(uniform_below(rng, pool));
      }
    }
  }
  return masked_batch_from_positions(batch, corrupted, std::move(positions));
}

}  // namespace rtdlab::text
