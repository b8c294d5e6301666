#include "rtdlab/rtd/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>

namespace rtdlab::rtd {

ConfigError::ConfigError(const std::string& field, const std::string& detail)
    : std::invalid_argument("config field '" + field + "': " + detail), field_(field) {}

std::string_view to_string(SharingMode mode) {
  switch (mode) {
    case SharingMode::kES: return "es";
    case SharingMode::kNES: return "nes";
    case SharingMode::kGDES: return "gdes";
  }
  return "?";
}

SharingMode parse_sharing_mode(std::string_view text) {
  if (text == "es" || text == "ES") return SharingMode::kES;
  if (text == "nes" || text == "NES") return SharingMode::kNES;
  if (text == "gdes" || text == "GDES") return SharingMode::kGDES;
  throw ConfigError("mode", "expected es, nes or gdes, got '" + std::string(text) + "'");
}

double parse_double(std::string_view key, std::string_view value) {
  const std::string s(value);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) {
    throw ConfigError(std::string(key), "not a finite number: '" + s + "'");
  }
  return v;
}

std::uint64_t parse_uint(std::string_view key, std::string_view value) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (value.empty() || ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError(std::string(key), "not a non-negative integer: '" + std::string(value) + "'");
  }
  return v;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(std::string(key), "expected true or false, got '" + std::string(value) + "'");
}

std::string format_double(double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

namespace {

void validate_encoder(const model::EncoderConfig& c, const std::string& prefix) {
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(prefix, e.what());
  }
}

struct Field {
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, std::string_view, std::string_view)> set;
};

template <typename M>
Field double_field(M member) {
  return {[member](const TrainConfig& c) { return format_double(c.*member); },
          [member](TrainConfig& c, std::string_view k, std::string_view v) { c.*member = parse_double(k, v); }};
}

template <typename M>
Field size_field(M member) {
  return {[member](const TrainConfig& c) { return std::to_string(c.*member); },
          [member](TrainConfig& c, std::string_view k, std::string_view v) {
            c.*member = static_cast<std::remove_reference_t<decltype(c.*member)>>(parse_uint(k, v));
          }};
}

template <typename M>
Field bool_field(M member) {
  return {[member](const TrainConfig& c) { return std::string(c.*member ? "true" : "false"); },
          [member](TrainConfig& c, std::string_view k, std::string_view v) { c.*member = parse_bool(k, v); }};
}

void add_encoder_fields(std::vector<std::pair<std::string, Field>>& fields, const std::string& prefix,
                        model::EncoderConfig TrainConfig::*enc) {
  auto sz = [&](const char* name, std::size_t model::EncoderConfig::*m) {
    fields.emplace_back(prefix + "." + name,
                        Field{[enc, m](const TrainConfig& c) { return std::to_string((c.*enc).*m); },
                              [enc, m](TrainConfig& c, std::string_view k, std::string_view v) {
                                (c.*enc).*m = static_cast<std::size_t>(parse_uint(k, v));
                              }});
  };
  sz("n_layers", &model::EncoderConfig::n_layers);
  sz("hidden", &model::EncoderConfig::hidden);
  sz("n_heads", &model::EncoderConfig::n_heads);
  sz("ffn_inner", &model::EncoderConfig::ffn_inner);
  sz("max_rel_distance", &model::EncoderConfig::max_rel_distance);
  sz("max_seq_len", &model::EncoderConfig::max_seq_len);
  fields.emplace_back(prefix + ".attention",
                      Field{[enc](const TrainConfig& c) { return std::string(model::to_string((c.*enc).attention_mode)); },
                            [enc](TrainConfig& c, std::string_view k, std::string_view v) {
                              try {
                                (c.*enc).attention_mode = model::parse_attention_mode(v);
                              } catch (const std::invalid_argument& e) {
                                throw ConfigError(std::string(k), e.what());
                              }
                            }});
  fields.emplace_back(prefix + ".dropout",
                      Field{[enc](const TrainConfig& c) { return format_double((c.*enc).dropout); },
                            [enc](TrainConfig& c, std::string_view k, std::string_view v) {
                              (c.*enc).dropout = parse_double(k, v);
                            }});
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const auto table = [] {
    std::vector<std::pair<std::string, Field>> f;
    f.emplace_back("mode", Field{[](const TrainConfig& c) { return std::string(to_string(c.mode)); },
                                 [](TrainConfig& c, std::string_view, std::string_view v) {
                                   c.mode = parse_sharing_mode(v);
                                 }});
    f.emplace_back("lambda", double_field(&TrainConfig::lambda));
    f.emplace_back("lr_peak", double_field(&TrainConfig::lr_peak));
    f.emplace_back("warmup_steps", size_field(&TrainConfig::warmup_steps));
    f.emplace_back("max_steps", size_field(&TrainConfig::max_steps));
    f.emplace_back("batch_size", size_field(&TrainConfig::batch_size));
    f.emplace_back("weight_decay", double_field(&TrainConfig::weight_decay));
    f.emplace_back("beta1", double_field(&TrainConfig::beta1));
    f.emplace_back("beta2", double_field(&TrainConfig::beta2));
    f.emplace_back("adam_eps", double_field(&TrainConfig::adam_eps));
    f.emplace_back("grad_clip_norm", double_field(&TrainConfig::grad_clip_norm));
    f.emplace_back("seed", size_field(&TrainConfig::seed));
    f.emplace_back("mask_rate", Field{[](const TrainConfig& c) { return format_double(c.masking.mask_rate); },
                                      [](TrainConfig& c, std::string_view k, std::string_view v) {
                                        c.masking.mask_rate = parse_double(k, v);
                                      }});
    f.emplace_back("p_mask", Field{[](const TrainConfig& c) { return format_double(c.masking.rule.p_mask); },
                                   [](TrainConfig& c, std::string_view k, std::string_view v) {
                                     c.masking.rule.p_mask = parse_double(k, v);
                                   }});
    f.emplace_back("p_random", Field{[](const TrainConfig& c) { return format_double(c.masking.rule.p_random); },
                                     [](TrainConfig& c, std::string_view k, std::string_view v) {
                                       c.masking.rule.p_random = parse_double(k, v);
                                     }});
    f.emplace_back("p_keep", Field{[](const TrainConfig& c) { return format_double(c.masking.rule.p_keep); },
                                   [](TrainConfig& c, std::string_view k, std::string_view v) {
                                     c.masking.rule.p_keep = parse_double(k, v);
                                   }});
    f.emplace_back("temperature", double_field(&TrainConfig::temperature));
    f.emplace_back("decay_delta", bool_field(&TrainConfig::decay_delta));
    f.emplace_back("tie_mlm", bool_field(&TrainConfig::tie_mlm));
    f.emplace_back("init_std", double_field(&TrainConfig::init_std));
    f.emplace_back("allow_shape_override", bool_field(&TrainConfig::allow_shape_override));
    add_encoder_fields(f, "generator", &TrainConfig::generator);
    add_encoder_fields(f, "discriminator", &TrainConfig::discriminator);
    return f;
  }();
  return table;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("lambda", "must be >= 0");
  if (!(lr_peak > 0.0)) throw ConfigError("lr_peak", "must be > 0");
  if (warmup_steps > max_steps) throw ConfigError("warmup_steps", "must not exceed max_steps");
  if (batch_size == 0) throw ConfigError("batch_size", "must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay", "must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2", "must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps", "must be > 0");
  if (grad_clip_norm < 0.0) throw ConfigError("grad_clip_norm", "must be >= 0");
  if (!(temperature > 0.0)) throw ConfigError("temperature", "must be > 0");
  if (!(init_std > 0.0)) throw ConfigError("init_std", "must be > 0");
  if (masking.mask_rate < 0.0 || masking.mask_rate > 1.0) throw ConfigError("mask_rate", "must lie in [0, 1]");
  const auto& r = masking.rule;
  if (r.p_mask < 0 || r.p_random < 0 || r.p_keep < 0 || std::abs(r.p_mask + r.p_random + r.p_keep - 1.0) > 1e-9) {
    throw ConfigError("p_mask", "p_mask + p_random + p_keep must equal 1");
  }
  validate_encoder(generator, "generator");
  validate_encoder(discriminator, "discriminator");
  if (generator.max_seq_len != discriminator.max_seq_len) {
    throw ConfigError("generator.max_seq_len", "must equal discriminator.max_seq_len");
  }
  try {
    model::validate_generator_shape(generator, discriminator, allow_shape_override);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("generator.n_layers", e.what());
  }
}

FlatConfig to_flat(const TrainConfig& config) {
  FlatConfig out;
  for (const auto& [key, field] : fields()) out.emplace_back(key, field.get(config));
  return out;
}

void apply_flat(TrainConfig& config, std::string_view key, std::string_view value) {
  for (const auto& [k, field] : fields()) {
    if (k == key) {
      field.set(config, key, value);
      return;
    }
  }
  throw ConfigError(std::string(key), "unknown key");
}

bool is_train_key(std::string_view key) {
  for (const auto& [k, field] : fields()) {
    if (k == key) return true;
  }
  return false;
}

}  // namespace rtdlab::rtd
