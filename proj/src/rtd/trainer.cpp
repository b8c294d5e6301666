#include "rtdlab/rtd/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

#include "rtdlab/rtd/checkpoint.hpp"
#include "rtdlab/rtd/losses.hpp"

namespace rtdlab::rtd {

using ad::Tensor;

namespace {

std::string divergence_message(std::size_t step, double mlm, double rtd) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "non-finite loss at step %zu (loss_mlm=%g, loss_rtd=%g)", step, mlm, rtd);
  return buf;
}

template <typename T>
std::vector<bool> decay_mask(const model::ParamList<T>& params, const TrainConfig& config) {
  auto mask = default_decay_mask(params);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name == "discriminator.embedding_delta") mask[i] = config.decay_delta;
  }
  return mask;
}

template <typename T>
void check_finite(std::size_t step, double mlm, double rtd) {
  if (!std::isfinite(mlm) || !std::isfinite(rtd)) throw DivergenceError(step, mlm, rtd);
}

std::size_t count_replaced(const text::MaskedBatch& masked, const text::TokenBatch& x_tilde) {
  std::size_t n = 0;
  for (auto p : masked.flat_positions) n += masked.original.ids[p] != x_tilde.ids[p] ? 1 : 0;
  return n;
}

// Releases every graph node built during a step, also on error paths.
template <typename T>
struct TapeScope {
  TapeScope() { ad::Tape<T>::current().clear(); }
  ~TapeScope() { ad::Tape<T>::current().clear(); }
};

template <typename T>
void notify(TrainState<T>& state, StepPhase phase) {
  if (state.on_gradients) state.on_gradients(phase);
}

template <typename T>
void require_mode(const ModelBundle<T>& bundle, const TrainConfig& config, SharingMode mode, const char* fn) {
  if (bundle.mode != mode || config.mode != mode) {
    throw std::invalid_argument(std::string(fn) + ": bundle/config mode is not " + std::string(to_string(mode)));
  }
}

// Generator phase shared by NES and GDES.
template <typename T>
text::TokenBatch generator_phase(ModelBundle<T>& bundle, const text::MaskedBatch& masked, const TrainConfig& config,
                                 TrainState<T>& state, double lr, MetricsRecord& rec) {
  TapeScope<T> scope;
  auto params = bundle.generator_params();
  model::zero_grads(params);
  auto logits = generator_logits(bundle, masked, &state.gen_dropout_rng);
  auto loss = mlm_loss(logits, masked);
  auto x_tilde = sample_replacements(logits, masked, config.temperature, state.sampling_rng);
  rec.loss_mlm = static_cast<double>(loss.item());
  check_finite<T>(rec.step, rec.loss_mlm, 0.0);
  loss.backward();
  notify(state, StepPhase::kGenerator);
  rec.grad_norm_G = state.gen->step(lr).grad_norm;
  return x_tilde;
}

template <typename T>
void discriminator_phase(ModelBundle<T>& bundle, const text::MaskedBatch& masked, const text::TokenBatch& x_tilde,
                         const TrainConfig& config, TrainState<T>& state, double lr, MetricsRecord& rec) {
  TapeScope<T> scope;
  auto all = bundle.all_params();
  model::zero_grads(all);
  auto labels = rtd_labels(masked, x_tilde);
  auto weights = masked.original.non_pad_weights();
  auto logits = discriminator_logits(bundle, bundle.discriminator_table(), masked, x_tilde, &state.disc_dropout_rng);
  auto loss = rtd_loss(logits, labels, weights);
  rec.loss_rtd = static_cast<double>(loss.item());
  check_finite<T>(rec.step, rec.loss_mlm, rec.loss_rtd);
  ad::scale(loss, static_cast<T>(config.lambda)).backward();
  notify(state, StepPhase::kDiscriminator);
  rec.grad_norm_D = state.disc->step(lr).grad_norm;
}

template <typename T>
MetricsRecord alternating_step(ModelBundle<T>& bundle, const text::TokenBatch& batch, const TrainConfig& config,
                               TrainState<T>& state) {
  ad::TrainingModeGuard training(true);
  MetricsRecord rec;
  rec.step = state.step + 1;
  rec.lr = lr_schedule(rec.step, config);
  auto masked = text::mask_tokens(batch, config.masking, bundle.vocab_size, state.masking_rng);
  rec.masked = masked.num_masked();
  auto x_tilde = generator_phase(bundle, masked, config, state, rec.lr, rec);
  rec.replaced = count_replaced(masked, x_tilde);
  if (state.rtd_phase) discriminator_phase(bundle, masked, x_tilde, config, state, rec.lr, rec);
  state.step = rec.step;
  return rec;
}

}  // namespace

DivergenceError::DivergenceError(std::size_t step, double loss_mlm, double loss_rtd)
    : std::runtime_error(divergence_message(step, loss_mlm, loss_rtd)), step_(step) {}

template <typename T>
TrainState<T> make_train_state(const ModelBundle<T>& bundle, const TrainConfig& config) {
  TrainState<T> s;
  const auto settings = AdamWSettings::from(config);
  if (config.mode == SharingMode::kES) {
    auto params = bundle.all_params();
    auto mask = decay_mask(params, config);
    s.joint = std::make_unique<AdamW<T>>(std::move(params), std::move(mask), settings);
  } else {
    auto gp = bundle.generator_params();
    auto gm = decay_mask(gp, config);
    s.gen = std::make_unique<AdamW<T>>(std::move(gp), std::move(gm), settings);
    auto dp = bundle.discriminator_params();
    auto dm = decay_mask(dp, config);
    s.disc = std::make_unique<AdamW<T>>(std::move(dp), std::move(dm), settings);
  }
  s.masking_rng = make_stream(config.seed, "masking");
  s.sampling_rng = make_stream(config.seed, "sampling");
  s.gen_dropout_rng = make_stream(config.seed, "dropout.generator");
  s.disc_dropout_rng = make_stream(config.seed, "dropout.discriminator");
  return s;
}

template <typename T>
MetricsRecord train_step_es(ModelBundle<T>& bundle, const text::TokenBatch& batch, const TrainConfig& config,
                            TrainState<T>& state) {
  require_mode(bundle, config, SharingMode::kES, "train_step_es");
  ad::TrainingModeGuard training(true);
  TapeScope<T> scope;
  MetricsRecord rec;
  rec.step = state.step + 1;
  rec.lr = lr_schedule(rec.step, config);
  auto masked = text::mask_tokens(batch, config.masking, bundle.vocab_size, state.masking_rng);
  rec.masked = masked.num_masked();

  auto all = bundle.all_params();
  model::zero_grads(all);
  auto gen_logits = generator_logits(bundle, masked, &state.gen_dropout_rng);
  auto l_mlm = mlm_loss(gen_logits, masked);
  auto x_tilde = sample_replacements(gen_logits, masked, config.temperature, state.sampling_rng);
  rec.replaced = count_replaced(masked, x_tilde);
  auto labels = rtd_labels(masked, x_tilde);
  auto weights = masked.original.non_pad_weights();
  auto d_logits = discriminator_logits(bundle, bundle.discriminator_table(), masked, x_tilde, &state.disc_dropout_rng);
  auto l_rtd = rtd_loss(d_logits, labels, weights);
  rec.loss_mlm = static_cast<double>(l_mlm.item());
  rec.loss_rtd = static_cast<double>(l_rtd.item());
  check_finite<T>(rec.step, rec.loss_mlm, rec.loss_rtd);

  ad::add(l_mlm, ad::scale(l_rtd, static_cast<T>(config.lambda))).backward();
  notify(state, StepPhase::kJoint);
  rec.grad_norm_G = model::grad_norm(bundle.generator_params());
  rec.grad_norm_D = model::grad_norm(bundle.discriminator_params());
  state.joint->step(rec.lr);
  state.step = rec.step;
  return rec;
}

template <typename T>
MetricsRecord train_step_nes(ModelBundle<T>& bundle, const text::TokenBatch& batch, const TrainConfig& config,
                             TrainState<T>& state) {
  require_mode(bundle, config, SharingMode::kNES, "train_step_nes");
  return alternating_step(bundle, batch, config, state);
}

template <typename T>
MetricsRecord train_step_gdes(ModelBundle<T>& bundle, const text::TokenBatch& batch, const TrainConfig& config,
                              TrainState<T>& state) {
  require_mode(bundle, config, SharingMode::kGDES, "train_step_gdes");
  return alternating_step(bundle, batch, config, state);
}

template <typename T>
MetricsRecord train_step(ModelBundle<T>& bundle, const text::TokenBatch& batch, const TrainConfig& config,
                         TrainState<T>& state) {
  switch (config.mode) {
    case SharingMode::kES: return train_step_es(bundle, batch, config, state);
    case SharingMode::kNES: return train_step_nes(bundle, batch, config, state);
    case SharingMode::kGDES: return train_step_gdes(bundle, batch, config, state);
  }
  throw std::logic_error("unknown sharing mode");
}

void write_metrics_header(std::ostream& out) { out << "step,loss_mlm,loss_rtd,lr,grad_norm_G,grad_norm_D\n"; }

void write_metrics_row(std::ostream& out, const MetricsRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.step, r.loss_mlm, r.loss_rtd, r.lr,
                r.grad_norm_G, r.grad_norm_D);
  out << buf;
}

template <typename T>
PretrainResult<T> pretrain(const TrainConfig& config, const std::vector<text::TokenSequence>& sequences,
                           std::size_t vocab_size, const PretrainOptions& options) {
  config.validate();
  PretrainResult<T> result{init_bundle<T>(config, vocab_size), {}};
  auto& bundle = result.bundle;
  auto state = make_train_state(bundle, config);

  std::ofstream metrics;
  const bool writing = !options.out_dir.empty();
  if (writing) {
    std::filesystem::create_directories(options.out_dir);
    metrics.open(options.out_dir / "metrics.csv", std::ios::binary);
    if (!metrics) throw std::ios_base::failure("cannot write " + (options.out_dir / "metrics.csv").string());
    write_metrics_header(metrics);
    save_checkpoint(bundle, config, 0, options.out_dir / "checkpoint-init.bin");
  }
  if (config.max_steps == 0) return result;
  if (sequences.empty()) throw std::invalid_argument("pretrain: no training sequences");

  text::BatchStream stream(sequences, config.batch_size, make_stream(config.seed, "data"));
  for (std::size_t i = 0; i < config.max_steps; ++i) {
    auto rec = train_step(bundle, stream.next(), config, state);
    result.metrics.push_back(rec);
    if (writing) {
      write_metrics_row(metrics, rec);
      if (options.checkpoint_every > 0 && rec.step % options.checkpoint_every == 0 && rec.step != config.max_steps) {
        save_checkpoint(bundle, config, rec.step, options.out_dir / ("checkpoint-" + std::to_string(rec.step) + ".bin"));
      }
    }
    if (options.on_step) options.on_step(rec);
  }
  if (writing) {
    metrics.flush();
    if (!metrics) throw std::ios_base::failure("failed writing metrics.csv");
    save_checkpoint(bundle, config, config.max_steps, options.out_dir / "checkpoint-final.bin");
  }
  return result;
}

#define RTDLAB_INSTANTIATE(T)                                                                                 \
  template TrainState<T> make_train_state<T>(const ModelBundle<T>&, const TrainConfig&);                     \
  template MetricsRecord train_step_es<T>(ModelBundle<T>&, const text::TokenBatch&, const TrainConfig&,      \
                                          TrainState<T>&);                                                   \
  template MetricsRecord train_step_nes<T>(ModelBundle<T>&, const text::TokenBatch&, const TrainConfig&,     \
                                           TrainState<T>&);                                                  \
  template MetricsRecord train_step_gdes<T>(ModelBundle<T>&, const text::TokenBatch&, const TrainConfig&,    \
                                            TrainState<T>&);                                                 \
  template MetricsRecord train_step<T>(ModelBundle<T>&, const text::TokenBatch&, const TrainConfig&,         \
                                       TrainState<T>&);                                                      \
  template PretrainResult<T> pretrain<T>(const TrainConfig&, const std::vector<text::TokenSequence>&,        \
                                         std::size_t, const PretrainOptions&);
RTDLAB_INSTANTIATE(float)
RTDLAB_INSTANTIATE(double)
#undef RTDLAB_INSTANTIATE

}  // namespace rtdlab::rtd
