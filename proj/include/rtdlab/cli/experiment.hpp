// Everything one experiment run needs, as a single flat key=value config.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "rtdlab/finetune/finetune.hpp"
#include "rtdlab/rtd/config.hpp"

namespace rtdlab::cli {

// Process exit codes. These are part of the command-line contract.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,     // anything not covered below
  kExitConfig = 2,      // invalid config, flag or value
  kExitDivergence = 3,  // non-finite loss during training or fine-tuning
  kExitIo = 4,          // unreadable input or unwritable output
  kExitCorrupt = 5,     // malformed or truncated checkpoint
};

enum class Precision { kFloat, kDouble };

struct ExperimentConfig {
  rtd::TrainConfig train;

  // Pre-training corpus: synthesized from the grammar unless a file is given.
  std::string grammar = "default";
  std::size_t corpus_tokens = 200000;
  std::uint64_t corpus_seed = 1;
  std::string corpus_path;
  std::size_t vocab_size = 1024;

  Precision precision = Precision::kFloat;
  std::size_t checkpoint_every = 0;

  double cosine_fraction = 1.0;
  std::uint64_t cosine_seed = 1;
  std::size_t smoothing_window = 50;

  bool finetune_enabled = true;
  finetune::FineTuneConfig finetune;
  std::size_t finetune_seeds = 5;
  std::size_t finetune_examples = 2000;
  double finetune_topical_rate = 0.4;
  std::uint64_t finetune_task_seed = 7;

  std::string out = "runs/latest";

  // Throws rtd::ConfigError naming the offending key.
  void validate() const;
};

rtd::FlatConfig to_flat(const ExperimentConfig& config);
// Throws rtd::ConfigError for unknown keys and unparsable values.
void apply_flat(ExperimentConfig& config, std::string_view key, std::string_view value);

// Parses "key = value" lines. Blank lines and lines whose first non-blank
// character is '#' are skipped; a '#' after a value starts a comment.
// Repeated keys keep the last value. Throws rtd::ConfigError for malformed
// lines (the field is "line N").
rtd::FlatConfig parse_config_text(std::string_view text);
// Throws std::ios_base::failure when the file cannot be read.
rtd::FlatConfig read_config_file(const std::filesystem::path& path);

// Config-file rendering of `config`, optionally preceded by comment lines.
std::string render_config(const ExperimentConfig& config, const std::vector<std::string>& comments = {});

}  // namespace rtdlab::cli
