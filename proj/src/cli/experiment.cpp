#include "rtdlab/cli/experiment.hpp"

#include <fstream>
#include <sstream>

#include "rtdlab/text/corpus.hpp"

namespace rtdlab::cli {

using rtd::ConfigError;
using rtd::format_double;
using rtd::parse_bool;
using rtd::parse_double;
using rtd::parse_uint;

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string_view to_string(Precision p) { return p == Precision::kFloat ? "float" : "double"; }

}  // namespace

void ExperimentConfig::validate() const {
  train.validate();
  try {
    text::grammar_info(grammar);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("corpus.grammar", e.what());
  }
  if (corpus_path.empty() && corpus_tokens == 0) throw ConfigError("corpus.tokens", "must be positive");
  if (vocab_size <= 5) throw ConfigError("vocab.size", "must leave room beyond the 5 special pieces");
  if (!(cosine_fraction > 0.0)) throw ConfigError("diag.cosine_fraction", "must be positive");
  if (smoothing_window == 0) throw ConfigError("diag.smoothing_window", "must be >= 1");
  if (finetune_enabled) {
    try {
      finetune.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("finetune." + e.field(), e.what());
    }
    if (finetune_seeds == 0) throw ConfigError("finetune.seeds", "must be >= 1");
    if (finetune_examples < 10) throw ConfigError("finetune.examples", "must be >= 10");
    if (!(finetune_topical_rate >= 0.0 && finetune_topical_rate <= 1.0)) {
      throw ConfigError("finetune.topical_rate", "must be in [0, 1]");
    }
  }
  if (out.empty()) throw ConfigError("out", "must not be empty");
}

rtd::FlatConfig to_flat(const ExperimentConfig& c) {
  rtd::FlatConfig f = rtd::to_flat(c.train);
  auto add = [&](std::string k, std::string v) { f.emplace_back(std::move(k), std::move(v)); };
  add("corpus.grammar", c.grammar);
  add("corpus.tokens", std::to_string(c.corpus_tokens));
  add("corpus.seed", std::to_string(c.corpus_seed));
  add("corpus.path", c.corpus_path);
  add("vocab.size", std::to_string(c.vocab_size));
  add("precision", std::string(to_string(c.precision)));
  add("checkpoint_every", std::to_string(c.checkpoint_every));
  add("diag.cosine_fraction", format_double(c.cosine_fraction));
  add("diag.cosine_seed", std::to_string(c.cosine_seed));
  add("diag.smoothing_window", std::to_string(c.smoothing_window));
  add("finetune.enabled", c.finetune_enabled ? "true" : "false");
  add("finetune.lr", format_double(c.finetune.lr));
  add("finetune.epochs", std::to_string(c.finetune.epochs));
  add("finetune.batch_size", std::to_string(c.finetune.batch_size));
  add("finetune.head_dropout", format_double(c.finetune.head_dropout));
  add("finetune.warmup_fraction", format_double(c.finetune.warmup_fraction));
  add("finetune.weight_decay", format_double(c.finetune.weight_decay));
  add("finetune.seeds", std::to_string(c.finetune_seeds));
  add("finetune.examples", std::to_string(c.finetune_examples));
  add("finetune.topical_rate", format_double(c.finetune_topical_rate));
  add("finetune.task_seed", std::to_string(c.finetune_task_seed));
  add("out", c.out);
  return f;
}

void apply_flat(ExperimentConfig& c, std::string_view key, std::string_view value) {
  if (rtd::is_train_key(key)) {
    rtd::apply_flat(c.train, key, value);
    return;
  }
  auto size = [&] { return static_cast<std::size_t>(parse_uint(key, value)); };
  if (key == "corpus.grammar") {
    c.grammar = std::string(value);
  } else if (key == "corpus.tokens") {
    c.corpus_tokens = size();
  } else if (key == "corpus.seed") {
    c.corpus_seed = parse_uint(key, value);
  } else if (key == "corpus.path") {
    c.corpus_path = std::string(value);
  } else if (key == "vocab.size") {
    c.vocab_size = size();
  } else if (key == "precision") {
    if (value == "float" || value == "f32") {
      c.precision = Precision::kFloat;
    } else if (value == "double" || value == "f64") {
      c.precision = Precision::kDouble;
    } else {
      throw ConfigError("precision", "expected float or double, got '" + std::string(value) + "'");
    }
  } else if (key == "checkpoint_every") {
    c.checkpoint_every = size();
  } else if (key == "diag.cosine_fraction") {
    c.cosine_fraction = parse_double(key, value);
  } else if (key == "diag.cosine_seed") {
    c.cosine_seed = parse_uint(key, value);
  } else if (key == "diag.smoothing_window") {
    c.smoothing_window = size();
  } else if (key == "finetune.enabled") {
    c.finetune_enabled = parse_bool(key, value);
  } else if (key == "finetune.lr") {
    c.finetune.lr = parse_double(key, value);
  } else if (key == "finetune.epochs") {
    c.finetune.epochs = size();
  } else if (key == "finetune.batch_size") {
    c.finetune.batch_size = size();
  } else if (key == "finetune.head_dropout") {
    c.finetune.head_dropout = parse_double(key, value);
  } else if (key == "finetune.warmup_fraction") {
    c.finetune.warmup_fraction = parse_double(key, value);
  } else if (key == "finetune.weight_decay") {
    c.finetune.weight_decay = parse_double(key, value);
  } else if (key == "finetune.seeds") {
    c.finetune_seeds = size();
  } else if (key == "finetune.examples") {
    c.finetune_examples = size();
  } else if (key == "finetune.topical_rate") {
    c.finetune_topical_rate = parse_double(key, value);
  } else if (key == "finetune.task_seed") {
    c.finetune_task_seed = parse_uint(key, value);
  } else if (key == "out") {
    c.out = std::string(value);
  } else {
    throw ConfigError(std::string(key), "unknown key");
  }
}

rtd::FlatConfig parse_config_text(std::string_view text) {
  rtd::FlatConfig out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (line_no == 1 && line.starts_with("\xEF\xBB\xBF")) line.remove_prefix(3);
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = trim(line.substr(0, hash));
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no), "expected key = value, got '" + std::string(line) + "'");
    }
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no), "empty key");
    out.emplace_back(std::string(key), std::string(trim(line.substr(eq + 1))));
  }
  return out;
}

rtd::FlatConfig read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot read config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

std::string render_config(const ExperimentConfig& config, const std::vector<std::string>& comments) {
  std::ostringstream out;
  for (const auto& c : comments) out << "# " << c << "\n";
  for (const auto& [k, v] : to_flat(config)) out << k << " = " << v << "\n";
  return out.str();
}

}  // namespace rtdlab::cli
