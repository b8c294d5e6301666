// Sharing modes and the pre-training configuration.

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rtdlab/model/encoder.hpp"
#include "rtdlab/text/masking.hpp"

namespace rtdlab::rtd {

// ES: one token table updated by L_MLM + lambda * L_RTD in a single backward.
// NES: separate tables, generator and discriminator updated alternately.
// GDES: discriminator embeds through stop_gradient(E_G) + E_delta.
enum class SharingMode { kES, kNES, kGDES };

std::string_view to_string(SharingMode mode);
SharingMode parse_sharing_mode(std::string_view text);
inline constexpr SharingMode kAllModes[] = {SharingMode::kES, SharingMode::kNES, SharingMode::kGDES};

using FlatConfig = std::vector<std::pair<std::string, std::string>>;

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(const std::string& field, const std::string& detail);
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct TrainConfig {
  SharingMode mode = SharingMode::kGDES;
  double lambda = 50.0;
  double lr_peak = 1e-3;
  std::size_t warmup_steps = 200;
  std::size_t max_steps = 2000;
  std::size_t batch_size = 32;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-6;
  double grad_clip_norm = 1.0;  // 0 disables clipping
  std::uint64_t seed = 1;
  text::MaskingConfig masking;
  double temperature = 1.0;
  bool decay_delta = true;  // E_delta takes weight decay like other embeddings
  bool tie_mlm = true;      // MLM output projection tied to the input table
  double init_std = 0.02;
  bool allow_shape_override = false;
  model::EncoderConfig generator{.n_layers = 1};
  model::EncoderConfig discriminator{.n_layers = 2};

  // Throws ConfigError naming the offending field.
  void validate() const;
};

// Flat key=value view in a fixed key order. `apply_flat` throws ConfigError
// on unknown keys or unparsable values.
FlatConfig to_flat(const TrainConfig& config);
void apply_flat(TrainConfig& config, std::string_view key, std::string_view value);
bool is_train_key(std::string_view key);

// Helpers shared by the other flat-config parsers.
double parse_double(std::string_view key, std::string_view value);
std::uint64_t parse_uint(std::string_view key, std::string_view value);
bool parse_bool(std::string_view key, std::string_view value);
std::string format_double(double value);

}  // namespace rtdlab::rtd
