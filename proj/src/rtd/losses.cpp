#include "rtdlab/rtd/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace rtdlab::rtd {

using ad::Tensor;

template <typename T>
Tensor<T> mlm_loss(const Tensor<T>& logits, const text::MaskedBatch& batch) {
  const std::size_t n = batch.num_masked();
  if (n == 0) throw std::invalid_argument("mlm_loss: no masked positions");
  std::vector<ad::Index> targets(batch.targets.begin(), batch.targets.end());
  if (logits.rank() == 2 && logits.dim(0) == n) return ad::cross_entropy(logits, std::span<const ad::Index>(targets));
  if (logits.rank() != 3) throw ad::ShapeError("mlm_loss", "expected (B,S,V) or (N,V) logits, got " + ad::shape_str(logits.shape()));
  const std::size_t rows = logits.dim(0) * logits.dim(1);
  const std::size_t v = logits.dim(2);
  std::vector<ad::Index> flat(batch.flat_positions.begin(), batch.flat_positions.end());
  for (auto p : batch.flat_positions) {
    if (p >= rows) throw ad::ShapeError("mlm_loss", "masked position outside logits");
  }
  auto picked = ad::embedding(ad::reshape(logits, {rows, v}), std::span<const ad::Index>(flat), {n});
  return ad::cross_entropy(picked, std::span<const ad::Index>(targets));
}

template <typename T>
text::TokenBatch sample_replacements(const Tensor<T>& logits, const text::MaskedBatch& batch, double temperature,
                                     Rng& rng) {
  if (!(temperature > 0.0)) throw std::invalid_argument("sample_replacements: temperature must be > 0");
  text::TokenBatch out = batch.original;
  const std::size_t n = batch.num_masked();
  if (n == 0) return out;
  const std::size_t v = logits.shape().back();
  const bool per_row = logits.rank() == 2 && logits.dim(0) == n;
  if (!per_row && logits.size() != out.ids.size() * v) {
    throw ad::ShapeError("sample_replacements", "logits do not match the batch: " + ad::shape_str(logits.shape()));
  }
  const auto vals = logits.values();
  std::vector<double> probs(v);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t flat = batch.flat_positions[r];
    const T* row = vals.data() + (per_row ? r : flat) * v;
    double max_val = -INFINITY;
    for (std::size_t j = 0; j < v; ++j) {
      const double x = static_cast<double>(row[j]);
      if (!std::isfinite(x)) throw std::domain_error("sample_replacements: non-finite generator logit");
      max_val = std::max(max_val, x / temperature);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      probs[j] = std::exp(static_cast<double>(row[j]) / temperature - max_val);
      total += probs[j];
    }
    const double u = uniform01(rng) * total;
    double acc = 0.0;
    std::size_t pick = v - 1;
    for (std::size_t j = 0; j < v; ++j) {
      acc += probs[j];
      if (u < acc) {
        pick = j;
        break;
      }
    }
    // Guard against landing on a zero-probability tail through rounding.
    while (probs[pick] == 0.0 && pick > 0) --pick;
    out.ids[flat] = static_cast<text::TokenId>(pick);
  }
  return out;
}

std::vector<double> rtd_labels(const text::MaskedBatch& batch, const text::TokenBatch& x_tilde) {
  const auto& orig = batch.original;
  if (orig.batch_size != x_tilde.batch_size || orig.seq_len != x_tilde.seq_len) {
    throw ad::ShapeError("rtd_labels", "replaced batch does not match the original");
  }
  std::vector<double> labels(orig.ids.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = orig.ids[i] == x_tilde.ids[i] ? 1.0 : 0.0;
  return labels;
}

template <typename T>
Tensor<T> rtd_loss(const Tensor<T>& logits, std::span<const double> labels, std::span<const double> non_pad_weights) {
  if (labels.size() != logits.size() || non_pad_weights.size() != logits.size()) {
    throw ad::ShapeError("rtd_loss", "labels/weights do not match logits " + ad::shape_str(logits.shape()));
  }
  std::vector<T> l(labels.begin(), labels.end());
  std::vector<T> w(non_pad_weights.begin(), non_pad_weights.end());
  return ad::bce_with_logits(logits, std::span<const T>(l), std::span<const T>(w));
}

template <typename T>
Tensor<T> generator_logits(const ModelBundle<T>& bundle, const text::MaskedBatch& batch, Rng* dropout_rng) {
  const auto& cfg = bundle.gen_config;
  auto ctx = model::make_context<T>(batch.corrupted, cfg, dropout_rng);
  auto x = model::embed_inputs(batch.corrupted, bundle.E_G, bundle.gen_body);
  auto h = model::encoder_forward(x, bundle.gen_body, cfg, ctx);
  return model::mlm_head_at(h, std::span<const std::size_t>(batch.flat_positions), bundle.E_G, bundle.mlm);
}

template <typename T>
Tensor<T> discriminator_logits(const ModelBundle<T>& bundle, const Tensor<T>& table, const text::MaskedBatch& batch,
                               const text::TokenBatch& x_tilde, Rng* dropout_rng) {
  const auto& cfg = bundle.disc_config;
  auto ctx = model::make_context<T>(batch.original, cfg, dropout_rng);
  auto x = model::embed_inputs(x_tilde, table, bundle.disc_body);
  auto h = model::encoder_forward(x, bundle.disc_body, cfg, ctx);
  return model::rtd_head(h, bundle.rtd);
}

#define RTDLAB_INSTANTIATE(T)                                                                                    \
  template Tensor<T> mlm_loss<T>(const Tensor<T>&, const text::MaskedBatch&);                                   \
  template text::TokenBatch sample_replacements<T>(const Tensor<T>&, const text::MaskedBatch&, double, Rng&);   \
  template Tensor<T> rtd_loss<T>(const Tensor<T>&, std::span<const double>, std::span<const double>);           \
  template Tensor<T> generator_logits<T>(const ModelBundle<T>&, const text::MaskedBatch&, Rng*);                \
  template Tensor<T> discriminator_logits<T>(const ModelBundle<T>&, const Tensor<T>&, const text::MaskedBatch&, \
                                             const text::TokenBatch&, Rng*);
RTDLAB_INSTANTIATE(float)
RTDLAB_INSTANTIATE(double)
#undef RTDLAB_INSTANTIATE

}  // namespace rtdlab::rtd
