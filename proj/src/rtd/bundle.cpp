#include "rtdlab/rtd/bundle.hpp"

#include <stdexcept>

namespace rtdlab::rtd {

using ad::Tensor;
using model::ParamList;

namespace {

template <typename T>
void append(ParamList<T>& out, const ParamList<T>& more) {
  out.insert(out.end(), more.begin(), more.end());
}

template <typename T>
void deep(Tensor<T>& t) {
  if (!t.defined()) return;
  Tensor<T> copy(t.shape(), std::vector<T>(t.values().begin(), t.values().end()), t.requires_grad());
  if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), copy.grad_mut().begin());
  t = copy;
}

template <typename T>
void deep(model::EncoderParams<T>& p) {
  deep(p.abs_pos);
  deep(p.rel_pos);
  for (auto& l : p.layers) {
    for (auto* t : {&l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.wq_rel,
                    &l.wk_rel, &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2}) {
      deep(*t);
    }
  }
  deep(p.final_ln_g);
  deep(p.final_ln_b);
}

}  // namespace

template <typename T>
ModelBundle<T> clone_bundle(const ModelBundle<T>& bundle) {
  ModelBundle<T> b = bundle;
  deep(b.E_G);
  deep(b.E_D);
  deep(b.E_delta);
  deep(b.gen_body);
  deep(b.disc_body);
  for (auto* t : {&b.mlm.dense_w, &b.mlm.dense_b, &b.mlm.ln_g, &b.mlm.ln_b, &b.mlm.bias, &b.mlm.output,
                  &b.rtd.dense_w, &b.rtd.dense_b, &b.rtd.out_w, &b.rtd.out_b}) {
    deep(*t);
  }
  return b;
}

template <typename T>
ParamList<T> ModelBundle<T>::generator_params() const {
  ParamList<T> out{{"generator.embeddings", E_G}};
  append(out, gen_body.named("generator.body"));
  append(out, mlm.named("generator.mlm"));
  return out;
}

template <typename T>
ParamList<T> ModelBundle<T>::discriminator_params() const {
  ParamList<T> out;
  if (mode == SharingMode::kNES) out.push_back({"discriminator.embeddings", E_D});
  if (mode == SharingMode::kGDES) out.push_back({"discriminator.embedding_delta", E_delta});
  append(out, disc_body.named("discriminator.body"));
  append(out, rtd.named("discriminator.rtd"));
  return out;
}

template <typename T>
ParamList<T> ModelBundle<T>::all_params() const {
  ParamList<T> out = generator_params();
  append(out, discriminator_params());
  return out;
}

template <typename T>
Tensor<T> ModelBundle<T>::discriminator_table() const {
  switch (mode) {
    case SharingMode::kES: return E_G;
    case SharingMode::kNES: return E_D;
    case SharingMode::kGDES: return ad::add(ad::stop_gradient(E_G), E_delta);
  }
  throw std::logic_error("unknown sharing mode");
}

template <typename T>
std::vector<T> ModelBundle<T>::materialized_discriminator_table() const {
  switch (mode) {
    case SharingMode::kES: return {E_G.values().begin(), E_G.values().end()};
    case SharingMode::kNES: return {E_D.values().begin(), E_D.values().end()};
    case SharingMode::kGDES: {
      std::vector<T> out(E_G.size());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = E_G.values()[i] + E_delta.values()[i];
      return out;
    }
  }
  throw std::logic_error("unknown sharing mode");
}

template <typename T>
ModelBundle<T> init_bundle(const TrainConfig& config, std::size_t vocab_size) {
  config.validate();
  if (vocab_size <= static_cast<std::size_t>(text::kNumSpecial)) {
    throw std::invalid_argument("init_bundle: vocabulary has no non-special pieces");
  }
  if (config.mode != SharingMode::kNES && config.generator.hidden != config.discriminator.hidden) {
    throw ConfigError("generator.hidden", "embedding sharing requires equal generator and discriminator width");
  }
  ModelBundle<T> b;
  b.mode = config.mode;
  b.vocab_size = vocab_size;
  b.gen_config = config.generator;
  b.disc_config = config.discriminator;

  Rng gen_rng = make_stream(config.seed, "init.generator");
  b.E_G = model::init_matrix<T>(vocab_size, config.generator.hidden, config.init_std, gen_rng);
  b.gen_body = model::init_encoder<T>(config.generator, gen_rng, config.init_std);
  b.mlm = model::init_mlm_head<T>(config.generator.hidden, vocab_size, config.tie_mlm, gen_rng, config.init_std);

  Rng disc_rng = make_stream(config.seed, "init.discriminator");
  b.disc_body = model::init_encoder<T>(config.discriminator, disc_rng, config.init_std);
  b.rtd = model::init_rtd_head<T>(config.discriminator.hidden, disc_rng, config.init_std);
  if (config.mode == SharingMode::kNES) {
    b.E_D = model::init_matrix<T>(vocab_size, config.discriminator.hidden, config.init_std, disc_rng);
  } else if (config.mode == SharingMode::kGDES) {
    b.E_delta = Tensor<T>::zeros({vocab_size, config.discriminator.hidden}, true);
  }
  return b;
}

template struct ModelBundle<float>;
template struct ModelBundle<double>;
template ModelBundle<float> clone_bundle<float>(const ModelBundle<float>&);
template ModelBundle<double> clone_bundle<double>(const ModelBundle<double>&);
template ModelBundle<float> init_bundle<float>(const TrainConfig&, std::size_t);
template ModelBundle<double> init_bundle<double>(const TrainConfig&, std::size_t);

}  // namespace rtdlab::rtd
