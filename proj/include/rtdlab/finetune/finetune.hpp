// Sequence classification on top of a pre-trained discriminator: a labeled
// synthetic task, full-model fine-tuning, and a multi-seed comparison of
// checkpoints.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "rtdlab/rtd/checkpoint.hpp"
#include "rtdlab/text/batching.hpp"
#include "rtdlab/text/vocab.hpp"

namespace rtdlab::finetune {

struct LabeledExample {
  text::TokenSequence tokens;
  int label = 0;
};

struct ClassificationTask {
  std::string grammar_id;
  std::size_t n_classes = 0;
  std::size_t vocab_size = 0;
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> dev;
};

struct TaskOptions {
  double topical_rate = 0.4;       // lower is harder
  std::size_t sentences_per_doc = 1;
  double dev_fraction = 0.2;       // taken from each class separately
  std::size_t max_seq_len = 64;
};

// Topic classification over documents from the synthetic grammar, encoded
// with `vocab`. Deterministic per seed. Throws std::invalid_argument for an
// unknown grammar or when a split would come out empty.
ClassificationTask make_task(const text::Vocab& vocab, std::string_view grammar_id, std::uint64_t seed,
                             std::size_t n_examples, const TaskOptions& options = {});

// Field names follow the usual fine-tuning hyper-parameter table.
struct FineTuneConfig {
  double lr = 5e-4;
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  double head_dropout = 0.1;
  double warmup_fraction = 0.1;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-6;
  double grad_clip_norm = 1.0;
  std::uint64_t seed = 1;

  // Throws rtd::ConfigError naming the field. Requires epochs >= 1.
  void validate() const;
};

class FineTuneDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FineTuneResult {
  double best_accuracy = 0.0;
  std::size_t best_epoch = 0;               // 0 when no training happened
  std::vector<double> epoch_accuracy;       // dev accuracy after each epoch
  std::vector<double> epoch_loss;           // mean training loss per epoch
};

template <typename T>
struct Classifier {
  model::EncoderConfig config;
  ad::Tensor<T> embeddings;
  model::EncoderParams<T> body;
  model::ClassifierHead<T> head;

  model::ParamList<T> named() const;
};

// Dev accuracy of `model` in evaluation mode.
template <typename T>
double evaluate(const Classifier<T>& model, const std::vector<LabeledExample>& examples,
                std::size_t batch_size = 64);

// Copies the discriminator (the argument is never modified), attaches a
// fresh linear head over the [CLS] state and fine-tunes every parameter with
// AdamW. Dev accuracy is measured after each epoch; the best epoch wins.
// With `epochs == 0` the untrained head is evaluated. Throws
// std::invalid_argument when the task's vocabulary does not match the
// embedding table and FineTuneDivergence on a non-finite loss.
template <typename T>
FineTuneResult finetune(const rtd::Discriminator<T>& source, const ClassificationTask& task,
                        const FineTuneConfig& config, Classifier<T>* tuned = nullptr);

struct ComparisonRow {
  std::string mode;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
};

struct ComparisonSummary {
  std::string mode;
  std::size_t runs = 0;
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation, 0 for a single run
};

struct Comparison {
  std::vector<ComparisonRow> rows;
  std::vector<ComparisonSummary> summary;

  const ComparisonSummary& summary_for(std::string_view mode) const;
  // Columns mode,seed,accuracy; one "<mode>,mean,<m>" and one
  // "<mode>,sd,<s>" line per mode after the runs.
  void write_csv(std::ostream& out) const;
  void write_csv(const std::filesystem::path& path) const;
};

template <typename T>
struct NamedDiscriminator {
  std::string mode;
  rtd::Discriminator<T> model;
};

// Fine-tunes every checkpoint once per seed (the seed replaces config.seed).
// Requires at least two checkpoints and one seed.
template <typename T>
Comparison compare_modes(const std::vector<NamedDiscriminator<T>>& checkpoints, const ClassificationTask& task,
                         const FineTuneConfig& config, const std::vector<std::uint64_t>& seeds);

}  // namespace rtdlab::finetune
