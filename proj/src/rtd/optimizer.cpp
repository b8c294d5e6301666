#include "rtdlab/rtd/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace rtdlab::rtd {

AdamWSettings AdamWSettings::from(const TrainConfig& config) {
  return {config.beta1, config.beta2, config.adam_eps, config.weight_decay, config.grad_clip_norm};
}

template <typename T>
AdamW<T>::AdamW(model::ParamList<T> params, std::vector<bool> decay, AdamWSettings settings)
    : params_(std::move(params)), decay_(std::move(decay)), settings_(settings) {
  if (decay_.size() != params_.size()) throw std::invalid_argument("AdamW: decay mask size mismatch");
  for (const auto& p : params_) {
    state_.m.emplace_back(p.tensor.size(), T(0));
    state_.v.emplace_back(p.tensor.size(), T(0));
  }
}

template <typename T>
UpdateInfo AdamW<T>::step(double lr) {
  double sq = 0.0;
  for (const auto& p : params_) {
    for (T g : p.tensor.grad()) {
      const double gd = static_cast<double>(g);
      if (!std::isfinite(gd)) throw std::domain_error("AdamW: non-finite gradient in " + p.name);
      sq += gd * gd;
    }
  }
  UpdateInfo info;
  info.grad_norm = std::sqrt(sq);
  if (settings_.clip_norm > 0.0 && info.grad_norm > settings_.clip_norm) {
    info.clip_scale = settings_.clip_norm / info.grad_norm;
  }

  ++state_.step;
  const double b1 = settings_.beta1, b2 = settings_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state_.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state_.step));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].tensor;
    auto theta = t.data();
    const auto grad = t.grad();
    auto& m = state_.m[i];
    auto& v = state_.v[i];
    const double decay = decay_[i] ? lr * settings_.weight_decay : 0.0;
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]) * info.clip_scale;
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * g;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      double x = static_cast<double>(theta[j]);
      x -= decay * x;
      x -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + settings_.eps);
      theta[j] = static_cast<T>(x);
    }
  }
  return info;
}

template <typename T>
std::vector<bool> default_decay_mask(const model::ParamList<T>& params) {
  std::vector<bool> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor.rank() >= 2);
  return out;
}

double lr_schedule(std::size_t step, const TrainConfig& config) {
  const double peak = config.lr_peak;
  if (step >= config.max_steps) return config.warmup_steps == config.max_steps && step == config.max_steps ? peak : 0.0;
  if (step < config.warmup_steps) {
    return peak * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
  }
  return peak * static_cast<double>(config.max_steps - step) /
         static_cast<double>(config.max_steps - config.warmup_steps);
}

template class AdamW<float>;
template class AdamW<double>;
template std::vector<bool> default_decay_mask<float>(const model::ParamList<float>&);
template std::vector<bool> default_decay_mask<double>(const model::ParamList<double>&);

}  // namespace rtdlab::rtd
