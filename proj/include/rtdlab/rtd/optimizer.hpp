// AdamW with global-norm clipping, and the warmup/linear-decay schedule.

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "rtdlab/model/params.hpp"
#include "rtdlab/rtd/config.hpp"

namespace rtdlab::rtd {

struct AdamWSettings {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-6;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // 0 disables clipping

  static AdamWSettings from(const TrainConfig& config);
};

template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> m;  // first moments, one per parameter
  std::vector<std::vector<T>> v;  // second moments
  std::uint64_t step = 0;
};

// Result of one update.
struct UpdateInfo {
  double grad_norm = 0.0;  // global norm before clipping
  double clip_scale = 1.0;
};

// Owns the moments of one parameter group. Parameters with `decay[i]` off
// skip the decoupled weight decay term.
template <typename T>
class AdamW {
 public:
  AdamW(model::ParamList<T> params, std::vector<bool> decay, AdamWSettings settings);

  // Clips the group's gradient to `clip_norm`, applies
  // theta <- theta - lr * wd * theta, then the bias-corrected Adam step.
  // Parameters with no accumulated gradient are treated as having zero
  // gradient. Throws std::domain_error on non-finite gradients.
  UpdateInfo step(double lr);

  const OptimizerState<T>& state() const { return state_; }
  OptimizerState<T>& state() { return state_; }
  const model::ParamList<T>& params() const { return params_; }
  const AdamWSettings& settings() const { return settings_; }

 private:
  model::ParamList<T> params_;
  std::vector<bool> decay_;
  AdamWSettings settings_;
  OptimizerState<T> state_;
};

// Default decay rule: matrices decay, vectors (biases and norm gains) do not.
template <typename T>
std::vector<bool> default_decay_mask(const model::ParamList<T>& params);

// Linear ramp 0 -> lr_peak over warmup_steps, then linear decay to 0 at
// max_steps. Steps past max_steps return 0.
double lr_schedule(std::size_t step, const TrainConfig& config);

}  // namespace rtdlab::rtd
