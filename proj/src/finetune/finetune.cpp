#include "rtdlab/finetune/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include "rtdlab/rtd/optimizer.hpp"
#include "rtdlab/text/corpus.hpp"
#include "rtdlab/util/csv.hpp"
#include "rtdlab/util/rng.hpp"

namespace rtdlab::finetune {

ClassificationTask make_task(const text::Vocab& vocab, std::string_view grammar_id, std::uint64_t seed,
                             std::size_t n_examples, const TaskOptions& options) {
  const auto& info = text::grammar_info(grammar_id);
  if (!(options.dev_fraction > 0.0 && options.dev_fraction < 1.0)) {
    throw std::invalid_argument("make_task: dev_fraction must be in (0, 1)");
  }
  const auto docs =
      text::synth_labeled(seed, n_examples, grammar_id, options.topical_rate, options.sentences_per_doc);

  ClassificationTask task;
  task.grammar_id = info.id;
  task.n_classes = info.n_topics;
  task.vocab_size = vocab.size();
  std::vector<std::vector<LabeledExample>> by_class(info.n_topics);
  for (const auto& d : docs) {
    by_class[static_cast<std::size_t>(d.topic)].push_back(
        {text::make_sequence(vocab, d.text, options.max_seq_len), d.topic});
  }
  // The generator already interleaves topics in random order, so the tail
  // of each class is as good a dev sample as any.
  for (auto& cls : by_class) {
    const auto n_dev = static_cast<std::size_t>(std::llround(options.dev_fraction * static_cast<double>(cls.size())));
    const std::size_t n_train = cls.size() - n_dev;
    for (std::size_t i = 0; i < cls.size(); ++i) (i < n_train ? task.train : task.dev).push_back(std::move(cls[i]));
  }
  if (task.train.empty() || task.dev.empty()) {
    throw std::invalid_argument("make_task: " + std::to_string(n_examples) + " examples leave an empty split");
  }
  // Undo the class grouping so training batches mix labels.
  Rng rng = make_stream(seed, "task.order");
  for (std::size_t i = task.train.size(); i > 1; --i) {
    std::swap(task.train[i - 1], task.train[uniform_below(rng, i)]);
  }
  return task;
}

void FineTuneConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw rtd::ConfigError("lr", "must be positive");
  if (epochs < 1) throw rtd::ConfigError("epochs", "must be >= 1");
  if (batch_size < 1) throw rtd::ConfigError("batch_size", "must be >= 1");
  if (!(head_dropout >= 0.0 && head_dropout < 1.0)) throw rtd::ConfigError("head_dropout", "must be in [0, 1)");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) {
    throw rtd::ConfigError("warmup_fraction", "must be in [0, 1]");
  }
  if (weight_decay < 0.0) throw rtd::ConfigError("weight_decay", "must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw rtd::ConfigError("beta1", "must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw rtd::ConfigError("beta2", "must be in [0, 1)");
  if (!(adam_eps > 0.0)) throw rtd::ConfigError("adam_eps", "must be positive");
  if (grad_clip_norm < 0.0) throw rtd::ConfigError("grad_clip_norm", "must be >= 0");
}

template <typename T>
model::ParamList<T> Classifier<T>::named() const {
  model::ParamList<T> out{{"classifier.embeddings", embeddings}};
  for (auto& p : body.named("classifier.body")) out.push_back(p);
  for (auto& p : head.named("classifier.head")) out.push_back(p);
  return out;
}

namespace {

text::TokenBatch batch_of(const std::vector<LabeledExample>& examples, std::span<const std::size_t> order,
                          std::vector<ad::Index>& labels) {
  std::vector<text::TokenSequence> seqs;
  labels.clear();
  for (auto i : order) {
    seqs.push_back(examples[i].tokens);
    labels.push_back(static_cast<ad::Index>(examples[i].label));
  }
  return text::make_batch(seqs);
}

template <typename T>
ad::Tensor<T> logits_for(const Classifier<T>& m, const text::TokenBatch& batch, double head_dropout, Rng* rng) {
  auto ctx = model::make_context<T>(batch, m.config, rng);
  auto h = model::encoder_forward(model::embed_inputs(batch, m.embeddings, m.body), m.body, m.config, ctx);
  return model::classifier_head(h, m.head, head_dropout, rng);
}

template <typename T>
struct TapeScope {
  TapeScope() { ad::Tape<T>::current().clear(); }
  ~TapeScope() { ad::Tape<T>::current().clear(); }
};

template <typename T>
Classifier<T> copy_discriminator(const rtd::Discriminator<T>& src, std::size_t n_classes, std::uint64_t seed) {
  Classifier<T> m;
  m.config = src.config;
  Rng unused = make_stream(0, "unused");
  m.body = model::init_encoder<T>(m.config, unused);
  m.embeddings = ad::Tensor<T>(src.embeddings.shape(),
                               std::vector<T>(src.embeddings.values().begin(), src.embeddings.values().end()), true);
  const auto from = src.body.named("b");
  const auto to = m.body.named("b");
  for (std::size_t i = 0; i < from.size(); ++i) {
    auto dst = to[i].tensor;
    std::copy(from[i].tensor.values().begin(), from[i].tensor.values().end(), dst.data().begin());
  }
  Rng head_rng = make_stream(seed, "finetune.head");
  m.head = model::init_classifier_head<T>(m.config.hidden, n_classes, head_rng);
  return m;
}

}  // namespace

template <typename T>
double evaluate(const Classifier<T>& model, const std::vector<LabeledExample>& examples, std::size_t batch_size) {
  if (examples.empty()) throw std::invalid_argument("evaluate: no examples");
  ad::NoGradGuard no_grad;
  ad::TrainingModeGuard eval(false);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<ad::Index> labels;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - start);
    auto batch = batch_of(examples, std::span(order).subspan(start, n), labels);
    auto logits = logits_for(model, batch, 0.0, nullptr);
    const std::size_t C = logits.dim(1);
    auto v = logits.values();
    for (std::size_t b = 0; b < n; ++b) {
      const auto row = v.subspan(b * C, C);
      const auto pred = std::max_element(row.begin(), row.end()) - row.begin();
      if (pred == labels[b]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

template <typename T>
FineTuneResult finetune(const rtd::Discriminator<T>& source, const ClassificationTask& task,
                        const FineTuneConfig& config, Classifier<T>* tuned) {
  if (config.epochs > 0) config.validate();
  if (task.vocab_size != source.embeddings.dim(0)) {
    throw std::invalid_argument("finetune: task vocabulary has " + std::to_string(task.vocab_size) +
                                " pieces but the checkpoint embeds " + std::to_string(source.embeddings.dim(0)));
  }
  if (task.train.empty() || task.dev.empty()) throw std::invalid_argument("finetune: empty task split");

  Classifier<T> m = copy_discriminator(source, task.n_classes, config.seed);
  FineTuneResult result;
  if (config.epochs == 0) {
    result.best_accuracy = evaluate(m, task.dev);
  } else {
    auto params = m.named();
    rtd::AdamWSettings settings{config.beta1, config.beta2, config.adam_eps, config.weight_decay,
                                config.grad_clip_norm};
    rtd::AdamW<T> opt(params, rtd::default_decay_mask(params), settings);
    Rng order_rng = make_stream(config.seed, "finetune.order");
    Rng dropout_rng = make_stream(config.seed, "finetune.dropout");
    const std::size_t per_epoch = (task.train.size() + config.batch_size - 1) / config.batch_size;
    const std::size_t total = per_epoch * config.epochs;
    const auto warmup = static_cast<std::size_t>(std::llround(config.warmup_fraction * static_cast<double>(total)));
    auto lr_at = [&](std::size_t k) {
      if (k < warmup) return config.lr * static_cast<double>(k + 1) / static_cast<double>(warmup);
      if (total == warmup) return config.lr;
      return config.lr * static_cast<double>(total - k) / static_cast<double>(total - warmup);
    };

    std::vector<std::size_t> order(task.train.size());
    std::vector<ad::Index> labels;
    std::size_t update = 0;
    result.best_accuracy = -1.0;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_below(order_rng, i)]);
      double loss_sum = 0.0;
      for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        const std::size_t n = std::min(config.batch_size, order.size() - start);
        TapeScope<T> scope;
        ad::TrainingModeGuard train(true);
        auto batch = batch_of(task.train, std::span(order).subspan(start, n), labels);
        model::zero_grads(params);
        auto loss = ad::cross_entropy(logits_for(m, batch, config.head_dropout, &dropout_rng), labels);
        const double l = static_cast<double>(loss.item());
        if (!std::isfinite(l)) {
          throw FineTuneDivergence("fine-tuning diverged at update " + std::to_string(update + 1) +
                                   " (loss " + std::to_string(l) + ")");
        }
        loss.backward();
        opt.step(lr_at(update++));
        loss_sum += l * static_cast<double>(n);
      }
      result.epoch_loss.push_back(loss_sum / static_cast<double>(order.size()));
      const double acc = evaluate(m, task.dev);
      result.epoch_accuracy.push_back(acc);
      if (acc > result.best_accuracy) {
        result.best_accuracy = acc;
        result.best_epoch = epoch;
      }
    }
  }
  if (tuned != nullptr) *tuned = std::move(m);
  return result;
}

const ComparisonSummary& Comparison::summary_for(std::string_view mode) const {
  for (const auto& s : summary) {
    if (s.mode == mode) return s;
  }
  throw std::out_of_range("no comparison summary for mode '" + std::string(mode) + "'");
}

void Comparison::write_csv(std::ostream& out) const {
  write_csv_row(out, {"mode", "seed", "accuracy"});
  for (const auto& r : rows) write_csv_row(out, {r.mode, std::to_string(r.seed), format_number(r.accuracy)});
  for (const auto& s : summary) {
    write_csv_row(out, {s.mode, "mean", format_number(s.mean)});
    write_csv_row(out, {s.mode, "sd", format_number(s.sd)});
  }
}

void Comparison::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::ios_base::failure("cannot write " + path.string());
  write_csv(out);
  if (!out) throw std::ios_base::failure("failed writing " + path.string());
}

template <typename T>
Comparison compare_modes(const std::vector<NamedDiscriminator<T>>& checkpoints, const ClassificationTask& task,
                         const FineTuneConfig& config, const std::vector<std::uint64_t>& seeds) {
  if (checkpoints.size() < 2) throw std::invalid_argument("compare_modes: need at least two checkpoints");
  if (seeds.empty()) throw std::invalid_argument("compare_modes: need at least one seed");
  Comparison out;
  for (const auto& c : checkpoints) {
    std::vector<double> acc;
    for (auto seed : seeds) {
      FineTuneConfig run = config;
      run.seed = seed;
      const double a = finetune(c.model, task, run).best_accuracy;
      out.rows.push_back({c.mode, seed, a});
      acc.push_back(a);
    }
    ComparisonSummary s;
    s.mode = c.mode;
    s.runs = acc.size();
    s.mean = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
    if (acc.size() > 1) {
      double ss = 0.0;
      for (double a : acc) ss += (a - s.mean) * (a - s.mean);
      s.sd = std::sqrt(ss / static_cast<double>(acc.size() - 1));
    }
    out.summary.push_back(s);
  }
  return out;
}

#define RTDLAB_INSTANTIATE(T)                                                                              \
  template struct Classifier<T>;                                                                           \
  template double evaluate<T>(const Classifier<T>&, const std::vector<LabeledExample>&, std::size_t);      \
  template FineTuneResult finetune<T>(const rtd::Discriminator<T>&, const ClassificationTask&,             \
                                      const FineTuneConfig&, Classifier<T>*);                              \
  template Comparison compare_modes<T>(const std::vector<NamedDiscriminator<T>>&, const ClassificationTask&, \
                                       const FineTuneConfig&, const std::vector<std::uint64_t>&);
RTDLAB_INSTANTIATE(float)
RTDLAB_INSTANTIATE(double)
#undef RTDLAB_INSTANTIATE

}  // namespace rtdlab::finetune
