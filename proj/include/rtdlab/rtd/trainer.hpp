// One training step per sharing mode, and the pre-training loop.

#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "rtdlab/rtd/bundle.hpp"
#include "rtdlab/rtd/optimizer.hpp"
#include "rtdlab/text/batching.hpp"

namespace rtdlab::rtd {

struct MetricsRecord {
  std::size_t step = 0;  // 1-based index of the completed update
  double loss_mlm = 0.0;
  double loss_rtd = 0.0;  // unscaled by lambda
  double lr = 0.0;
  double grad_norm_G = 0.0;  // pre-clip norms of each group's gradient
  double grad_norm_D = 0.0;
  std::size_t masked = 0;
  std::size_t replaced = 0;  // masked positions whose sample differs from the original
};

// Raised when a loss turns non-finite; what() carries the step and losses.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t step, double loss_mlm, double loss_rtd);
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

enum class StepPhase { kJoint, kGenerator, kDiscriminator };

template <typename T>
struct TrainState {
  // ES steps all parameters with `joint`; NES and GDES use `gen` and `disc`.
  std::unique_ptr<AdamW<T>> joint, gen, disc;
  Rng masking_rng, sampling_rng, gen_dropout_rng, disc_dropout_rng;
  std::size_t step = 0;
  // Off skips the discriminator phase of NES/GDES entirely.
  bool rtd_phase = true;
  // Called after each backward and before the matching update, so callers
  // can inspect accumulated gradients.
  std::function<void(StepPhase)> on_gradients;
};

template <typename T>
TrainState<T> make_train_state(const ModelBundle<T>& bundle, const TrainConfig& config);

template <typename T>
MetricsRecord train_step_es(ModelBundle<T>& bundle, const text::TokenBatch& batch, const TrainConfig& config,
                            TrainState<T>& state);
template <typename T>
MetricsRecord train_step_nes(ModelBundle<T>& bundle, const text::TokenBatch& batch, const TrainConfig& config,
                             TrainState<T>& state);
template <typename T>
MetricsRecord train_step_gdes(ModelBundle<T>& bundle, const text::TokenBatch& batch, const TrainConfig& config,
                              TrainState<T>& state);
// Dispatches on config.mode.
template <typename T>
MetricsRecord train_step(ModelBundle<T>& bundle, const text::TokenBatch& batch, const TrainConfig& config,
                         TrainState<T>& state);

void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const MetricsRecord& record);

struct PretrainOptions {
  std::filesystem::path out_dir;  // empty: nothing is written
  std::size_t checkpoint_every = 0;
  std::function<void(const MetricsRecord&)> on_step;
};

template <typename T>
struct PretrainResult {
  ModelBundle<T> bundle;
  std::vector<MetricsRecord> metrics;
};

// Runs config.max_steps updates over batches drawn from `sequences`. With an
// output directory it writes metrics.csv, checkpoint-init.bin before the
// first step, checkpoint-<step>.bin every `checkpoint_every` steps and
// checkpoint-final.bin at the end (skipped for zero steps).
template <typename T>
PretrainResult<T> pretrain(const TrainConfig& config, const std::vector<text::TokenSequence>& sequences,
                           std::size_t vocab_size, const PretrainOptions& options = {});

}  // namespace rtdlab::rtd
