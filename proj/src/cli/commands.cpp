#include "rtdlab/cli/commands.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include "rtdlab/diag/diagnostics.hpp"
#include "rtdlab/finetune/finetune.hpp"
#include "rtdlab/rtd/checkpoint.hpp"
#include "rtdlab/rtd/losses.hpp"
#include "rtdlab/rtd/trainer.hpp"
#include "rtdlab/text/corpus.hpp"
#include "rtdlab/text/masking.hpp"

#ifndef RTDLAB_CODE_VERSION
#define RTDLAB_CODE_VERSION "unknown"
#endif

namespace rtdlab::cli {

const char* code_version() { return RTDLAB_CODE_VERSION; }

namespace fs = std::filesystem;

namespace {

// Flags shared by the commands that resolve an ExperimentConfig.
struct CommonFlags {
  std::string config_path;
  std::string mode;
  std::string attention;
  std::string out;
  std::string precision;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::optional<double> lambda;
  bool quiet = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Flat key = value config file");
    cmd->add_option("--mode", mode, "Embedding sharing: es, nes or gdes");
    cmd->add_option("--seed", seed, "Master seed");
    cmd->add_option("--steps", steps, "Number of pre-training updates");
    cmd->add_option("--lambda", lambda, "Weight of the RTD loss");
    cmd->add_option("--out", out, "Output directory");
    cmd->add_option("--attention", attention, "Attention for both encoders: standard or disentangled");
    cmd->add_option("--precision", precision, "float or double");
    cmd->add_option("--set", sets, "Override any config key: --set key=value (repeatable)");
    cmd->add_flag("--quiet", quiet, "No progress output");
  }
};

ExperimentConfig resolve(const CommonFlags& f) {
  ExperimentConfig c;
  bool warmup_given = false;
  auto set = [&](const std::string& key, const std::string& value) {
    if (key == "warmup_steps") warmup_given = true;
    apply_flat(c, key, value);
  };
  if (!f.config_path.empty()) {
    for (const auto& [k, v] : read_config_file(f.config_path)) set(k, v);
  }
  if (!f.mode.empty()) set("mode", f.mode);
  if (f.seed) set("seed", std::to_string(*f.seed));
  if (f.steps) set("max_steps", std::to_string(*f.steps));
  if (f.lambda) set("lambda", rtd::format_double(*f.lambda));
  if (!f.out.empty()) set("out", f.out);
  if (!f.attention.empty()) {
    set("generator.attention", f.attention);
    set("discriminator.attention", f.attention);
  }
  if (!f.precision.empty()) set("precision", f.precision);
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw rtd::ConfigError("--set", "expected key=value, got '" + s + "'");
    set(s.substr(0, eq), s.substr(eq + 1));
  }
  // The built-in warmup would otherwise outlast a short run; an explicit
  // warmup longer than the run is still reported as an error.
  if (!warmup_given) c.train.warmup_steps = std::min(c.train.warmup_steps, c.train.max_steps);
  c.validate();
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::ios_base::failure("cannot write " + path.string());
  out << text;
  if (!out) throw std::ios_base::failure("failed writing " + path.string());
}

void write_manifest(const fs::path& dir, const ExperimentConfig& c, const std::string& command) {
  write_text(dir / "manifest.txt", render_config(c, {"rtdlab " + command, "code_version: " + std::string(code_version()),
                                                     "rerun: rtdlab " + command + " --config <this file>"}));
}

struct Corpus {
  text::Vocab vocab;
  std::vector<text::TokenSequence> sequences;
};

Corpus prepare_corpus(const ExperimentConfig& c) {
  std::vector<std::string> lines;
  if (!c.corpus_path.empty()) {
    lines = text::read_corpus(c.corpus_path);
  } else {
    lines = text::document_lines(text::corpus_synth(c.corpus_seed, c.corpus_tokens, c.grammar));
  }
  Corpus out;
  out.vocab = text::build_vocab(lines, c.vocab_size);
  out.sequences = text::pretraining_sequences(out.vocab, lines, c.train.discriminator.max_seq_len);
  if (out.sequences.empty()) throw rtd::ConfigError("corpus.path", "corpus has no usable lines");
  return out;
}

template <typename F>
auto with_precision(Precision p, F&& f) {
  if (p == Precision::kFloat) return f(float{});
  return f(double{});
}

template <typename T>
struct RunOutput {
  rtd::PretrainResult<T> result;
  fs::path dir;
};

template <typename T>
RunOutput<T> run_pretrain(const ExperimentConfig& c, const Corpus& corpus, const fs::path& dir,
                          const std::string& command, bool quiet, std::ostream& err) {
  fs::create_directories(dir);
  write_manifest(dir, c, command);
  corpus.vocab.save(dir / "vocab.txt");
  rtd::PretrainOptions opts;
  opts.out_dir = dir;
  opts.checkpoint_every = c.checkpoint_every;
  const std::size_t every = std::max<std::size_t>(1, c.train.max_steps / 10);
  if (!quiet) {
    opts.on_step = [&err, &c, every](const rtd::MetricsRecord& r) {
      if (r.step % every == 0 || r.step == c.train.max_steps) {
        char line[160];
        std::snprintf(line, sizeof line, "[%s] step %zu/%zu  mlm %.4f  rtd %.4f  lr %.2e\n",
                      std::string(rtd::to_string(c.train.mode)).c_str(), r.step, c.train.max_steps, r.loss_mlm,
                      r.loss_rtd, r.lr);
        err << line << std::flush;
      }
    };
  }
  return {rtd::pretrain<T>(c.train, corpus.sequences, corpus.vocab.size(), opts), dir};
}

int cmd_pretrain(const CommonFlags& flags, std::ostream& out, std::ostream& err) {
  const ExperimentConfig c = resolve(flags);
  const Corpus corpus = prepare_corpus(c);
  return with_precision(c.precision, [&](auto tag) {
    using T = decltype(tag);
    auto run = run_pretrain<T>(c, corpus, c.out, "pretrain", flags.quiet, err);
    out << "mode=" << rtd::to_string(c.train.mode) << " steps=" << c.train.max_steps
        << " vocab=" << corpus.vocab.size() << " sequences=" << corpus.sequences.size() << "\n";
    if (!run.result.metrics.empty()) {
      const auto& last = run.result.metrics.back();
      out << "final loss_mlm=" << last.loss_mlm << " loss_rtd=" << last.loss_rtd << "\n";
    }
    out << "output=" << run.dir.string() << "\n";
    return kExitOk;
  });
}

std::vector<rtd::SharingMode> parse_modes(const std::string& list) {
  std::vector<rtd::SharingMode> modes;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      const auto m = rtd::parse_sharing_mode(item);
      if (std::find(modes.begin(), modes.end(), m) != modes.end()) {
        throw rtd::ConfigError("--modes", "mode '" + item + "' listed twice");
      }
      modes.push_back(m);
    } catch (const rtd::ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw rtd::ConfigError("--modes", e.what());
    }
  }
  if (modes.empty()) throw rtd::ConfigError("--modes", "no modes given");
  return modes;
}

std::vector<std::uint64_t> finetune_seed_list(std::size_t n) {
  std::vector<std::uint64_t> seeds(n);
  for (std::size_t i = 0; i < n; ++i) seeds[i] = i + 1;
  return seeds;
}

std::string opt_num(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", *v);
  return buf;
}

int cmd_compare(const CommonFlags& flags, const std::string& modes_text, bool no_finetune, std::ostream& out,
                std::ostream& err) {
  ExperimentConfig c = resolve(flags);
  if (no_finetune) c.finetune_enabled = false;
  const auto modes = parse_modes(modes_text);
  const Corpus corpus = prepare_corpus(c);
  const fs::path dir = c.out;
  fs::create_directories(dir);
  std::string modes_note = "modes:";
  for (auto m : modes) modes_note += " " + std::string(rtd::to_string(m));
  write_text(dir / "manifest.txt",
             render_config(c, {"rtdlab compare", modes_note, "code_version: " + std::string(code_version())}));

  return with_precision(c.precision, [&](auto tag) {
    using T = decltype(tag);
    std::vector<diag::Curve> curves;
    std::vector<diag::CosineReport> cosines;
    std::vector<finetune::NamedDiscriminator<T>> discs;
    for (auto mode : modes) {
      ExperimentConfig cm = c;
      cm.train.mode = mode;
      const std::string name(rtd::to_string(mode));
      auto run = run_pretrain<T>(cm, corpus, dir / name, "pretrain", flags.quiet, err);
      diag::Curve curve{name, {}, {}};
      for (const auto& r : run.result.metrics) {
        curve.steps.push_back(r.step);
        curve.values.push_back(r.loss_mlm);
      }
      if (!curve.values.empty()) curves.push_back(std::move(curve));
      const auto report = diag::cosine_report(run.result.bundle, c.cosine_fraction, c.cosine_seed);
      write_text(dir / ("cosine_" + name + ".txt"), report.to_text());
      cosines.push_back(report);
      if (c.finetune_enabled && modes.size() >= 2) {
        discs.push_back({name, rtd::load_discriminator<T>(rtd::make_checkpoint(
                                   run.result.bundle, cm.train, run.result.metrics.size()))});
      }
    }

    std::ostringstream report;
    report << "modes:";
    for (auto m : modes) report << " " << rtd::to_string(m);
    report << "\nsteps: " << c.train.max_steps << "\nseed: " << c.train.seed << "\n\n";
    if (!curves.empty()) {
      const auto smooth = diag::curve_capture(curves, c.smoothing_window, dir / "loss_curves.csv",
                                              dir / "loss_curves.svg", "Generator MLM loss");
      report << "final smoothed generator MLM loss (window " << c.smoothing_window << ")\n";
      for (const auto& s : smooth) report << "  " << s.label << " " << opt_num(s.values.back()) << "\n";
      report << "\n";
    }
    report << "average cosine similarity (mode sim_EG sim_ED sim_Edelta)\n";
    for (const auto& r : cosines) {
      report << "  " << rtd::to_string(r.mode) << " " << opt_num(r.sim_EG) << " " << opt_num(r.sim_ED) << " "
             << opt_num(r.sim_Edelta) << "\n";
    }
    if (discs.size() >= 2) {
      text::Vocab vocab = corpus.vocab;
      finetune::TaskOptions topts;
      topts.topical_rate = c.finetune_topical_rate;
      topts.max_seq_len = c.train.discriminator.max_seq_len;
      const auto task = finetune::make_task(vocab, c.grammar, c.finetune_task_seed, c.finetune_examples, topts);
      if (!flags.quiet) err << "fine-tuning " << discs.size() << " checkpoints x " << c.finetune_seeds << " seeds\n";
      const auto cmp = finetune::compare_modes(discs, task, c.finetune, finetune_seed_list(c.finetune_seeds));
      cmp.write_csv(dir / "finetune_comparison.csv");
      report << "\nfine-tune dev accuracy over " << c.finetune_seeds << " seeds (mean sd)\n";
      for (const auto& s : cmp.summary) report << "  " << s.mode << " " << opt_num(s.mean) << " " << opt_num(s.sd) << "\n";
    }
    write_text(dir / "report.txt", report.str());
    out << report.str() << "output=" << dir.string() << "\n";
    return kExitOk;
  });
}

struct DiagnoseFlags {
  std::string checkpoint;
  std::optional<double> fraction;
  std::uint64_t cosine_seed = 1;
  bool probe = false;
  std::string corpus;
  std::string vocab;
  std::uint64_t seed = 1;
  std::size_t batch_size = 32;
  std::string out;
};

fs::path default_vocab(const fs::path& checkpoint, const std::string& given) {
  if (!given.empty()) return given;
  return checkpoint.parent_path() / "vocab.txt";
}

int cmd_diagnose(const DiagnoseFlags& f, std::ostream& out) {
  if (f.fraction && !(*f.fraction > 0.0)) throw rtd::ConfigError("--fraction", "must be positive");
  const auto ckpt = rtd::read_checkpoint(f.checkpoint);
  const auto report = diag::cosine_report(ckpt, f.fraction.value_or(1.0), f.cosine_seed);
  out << report.to_text();
  if (!f.out.empty()) {
    fs::create_directories(f.out);
    write_text(fs::path(f.out) / "cosine.txt", report.to_text());
  }
  if (!f.probe) return kExitOk;

  if (ckpt.config.mode == rtd::SharingMode::kNES) {
    throw rtd::ConfigError("--probe", "NES checkpoints have no shared embedding table to probe");
  }
  if (f.corpus.empty()) throw rtd::ConfigError("--corpus", "the probe needs a corpus file to draw its batch from");
  const auto vocab = text::Vocab::load(default_vocab(f.checkpoint, f.vocab));
  if (vocab.size() != ckpt.vocab_size) {
    throw rtd::ConfigError("--vocab", "vocabulary has " + std::to_string(vocab.size()) +
                                          " pieces, checkpoint expects " + std::to_string(ckpt.vocab_size));
  }
  auto seqs = text::pretraining_sequences(vocab, text::read_corpus(f.corpus), ckpt.config.discriminator.max_seq_len);
  if (seqs.empty()) throw rtd::ConfigError("--corpus", "corpus has no usable lines");
  seqs.resize(std::min(seqs.size(), f.batch_size));
  const auto bundle = rtd::bundle_from_checkpoint<double>(ckpt);
  Rng mask_rng = make_stream(f.seed, "masking");
  Rng sample_rng = make_stream(f.seed, "sampling");
  const auto masked = text::mask_tokens(text::make_batch(seqs), ckpt.config.masking, ckpt.vocab_size, mask_rng);
  text::TokenBatch x_tilde;
  {
    ad::NoGradGuard no_grad;
    ad::TrainingModeGuard eval(false);
    x_tilde = rtd::sample_replacements(rtd::generator_logits(bundle, masked, nullptr), masked,
                                       ckpt.config.temperature, sample_rng);
  }
  auto probe = diag::interference_probe(bundle, masked, x_tilde, ckpt.config.lambda);
  probe.step = ckpt.step;
  out << probe.to_text();
  if (!f.out.empty()) write_text(fs::path(f.out) / "interference.txt", probe.to_text());
  return kExitOk;
}

struct FinetuneFlags {
  std::vector<std::string> checkpoints;
  std::string vocab;
};

int cmd_finetune(const CommonFlags& common, const FinetuneFlags& f, std::ostream& out, std::ostream& err) {
  const ExperimentConfig c = resolve(common);
  if (f.checkpoints.empty()) throw rtd::ConfigError("--checkpoint", "at least one checkpoint is required");
  std::vector<std::pair<std::string, rtd::Checkpoint>> loaded;
  for (const auto& spec : f.checkpoints) {
    std::string label, path = spec;
    if (const auto eq = spec.find('='); eq != std::string::npos) {
      label = spec.substr(0, eq);
      path = spec.substr(eq + 1);
    }
    auto ckpt = rtd::read_checkpoint(path);
    if (label.empty()) label = std::string(rtd::to_string(ckpt.config.mode));
    for (const auto& [l, _] : loaded) {
      if (l == label) label += "-" + std::to_string(loaded.size() + 1);
    }
    loaded.emplace_back(label, std::move(ckpt));
  }
  const fs::path first = f.checkpoints.front().substr(f.checkpoints.front().find('=') + 1);
  const auto vocab = text::Vocab::load(default_vocab(first, f.vocab));
  const fs::path dir = c.out;
  fs::create_directories(dir);
  write_manifest(dir, c, "finetune");

  return with_precision(c.precision, [&](auto tag) {
    using T = decltype(tag);
    finetune::TaskOptions topts;
    topts.topical_rate = c.finetune_topical_rate;
    topts.max_seq_len = loaded.front().second.config.discriminator.max_seq_len;
    const auto task = finetune::make_task(vocab, c.grammar, c.finetune_task_seed, c.finetune_examples, topts);
    std::vector<finetune::NamedDiscriminator<T>> discs;
    for (const auto& [label, ckpt] : loaded) discs.push_back({label, rtd::load_discriminator<T>(ckpt)});
    const auto seeds = finetune_seed_list(c.finetune_seeds);
    finetune::Comparison cmp;
    if (discs.size() >= 2) {
      cmp = finetune::compare_modes(discs, task, c.finetune, seeds);
    } else {
      // A single checkpoint still gets the same table layout.
      double sum = 0.0, sq = 0.0;
      for (auto seed : seeds) {
        auto cfg = c.finetune;
        cfg.seed = seed;
        const double acc = finetune::finetune(discs.front().model, task, cfg).best_accuracy;
        if (!common.quiet) err << "seed " << seed << " accuracy " << acc << "\n";
        cmp.rows.push_back({discs.front().mode, seed, acc});
        sum += acc;
        sq += acc * acc;
      }
      const double n = static_cast<double>(seeds.size());
      const double mean = sum / n;
      const double var = seeds.size() > 1 ? std::max(0.0, (sq - n * mean * mean) / (n - 1)) : 0.0;
      cmp.summary.push_back({discs.front().mode, seeds.size(), mean, std::sqrt(var)});
    }
    cmp.write_csv(dir / "finetune.csv");
    for (const auto& s : cmp.summary) out << s.mode << " mean=" << s.mean << " sd=" << s.sd << " runs=" << s.runs << "\n";
    out << "output=" << (dir / "finetune.csv").string() << "\n";
    return kExitOk;
  });
}

int cmd_export(const std::string& checkpoint, const std::string& target, std::ostream& out) {
  if (target.empty()) throw rtd::ConfigError("--out", "export needs an output file");
  const auto ckpt = rtd::read_checkpoint(checkpoint);
  const auto view = rtd::discriminator_only(ckpt);
  if (const auto parent = fs::path(target).parent_path(); !parent.empty()) fs::create_directories(parent);
  rtd::write_checkpoint(view, target);
  out << "exported " << view.records.size() << " discriminator records (" << rtd::to_string(ckpt.config.mode)
      << ", step " << ckpt.step << ") to " << target << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Replaced-token-detection pre-training with ES, NES and GDES embedding sharing", "rtdlab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(code_version()));

  CommonFlags pretrain_flags, compare_flags, finetune_common;
  auto* pretrain = app.add_subcommand("pretrain", "Pre-train one generator/discriminator pair");
  pretrain_flags.attach(pretrain);

  auto* compare = app.add_subcommand("compare", "Pre-train several sharing modes and assemble a report");
  compare_flags.attach(compare);
  std::string modes = "es,nes,gdes";
  bool no_finetune = false;
  compare->add_option("--modes", modes, "Comma-separated sharing modes")->capture_default_str();
  compare->add_flag("--no-finetune", no_finetune, "Skip the fine-tuning comparison");

  DiagnoseFlags diag_flags;
  auto* diagnose = app.add_subcommand("diagnose", "Embedding statistics and gradient-interference probe");
  diagnose->add_option("checkpoint", diag_flags.checkpoint, "Checkpoint file")->required();
  diagnose->add_option("--fraction", diag_flags.fraction, "Fraction of word pieces sampled (default 1)");
  diagnose->add_option("--cosine-seed", diag_flags.cosine_seed, "Seed for row sampling");
  diagnose->add_flag("--probe", diag_flags.probe, "Also run the gradient-interference probe");
  diagnose->add_option("--corpus", diag_flags.corpus, "Corpus file (one document per line) for the probe batch");
  diagnose->add_option("--vocab", diag_flags.vocab, "Vocabulary file (default: vocab.txt next to the checkpoint)");
  diagnose->add_option("--seed", diag_flags.seed, "Seed for the probe's masking and sampling");
  diagnose->add_option("--batch-size", diag_flags.batch_size, "Sequences in the probe batch");
  diagnose->add_option("--out", diag_flags.out, "Directory for the report files");

  FinetuneFlags ft_flags;
  auto* ft = app.add_subcommand("finetune", "Fine-tune checkpoints on the synthetic classification task");
  finetune_common.attach(ft);
  ft->add_option("--checkpoint", ft_flags.checkpoints, "Checkpoint file, optionally label=path (repeatable)");
  ft->add_option("--vocab", ft_flags.vocab, "Vocabulary file (default: vocab.txt next to the first checkpoint)");

  std::string export_in, export_out;
  auto* exp = app.add_subcommand("export", "Write the discriminator-only checkpoint");
  exp->add_option("checkpoint", export_in, "Checkpoint file")->required();
  exp->add_option("--out", export_out, "Output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << code_version() << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (pretrain->parsed()) return cmd_pretrain(pretrain_flags, out, err);
    if (compare->parsed()) return cmd_compare(compare_flags, modes, no_finetune, out, err);
    if (diagnose->parsed()) return cmd_diagnose(diag_flags, out);
    if (ft->parsed()) return cmd_finetune(finetune_common, ft_flags, out, err);
    if (exp->parsed()) return cmd_export(export_in, export_out, out);
  } catch (const rtd::ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const rtd::DivergenceError& e) {
    err << "diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const finetune::FineTuneDivergence& e) {
    err << "diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const rtd::CheckpointError& e) {
    err << "corrupt checkpoint: " << e.what() << "\n";
    return kExitCorrupt;
  } catch (const std::ios_base::failure& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"rtdlab"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace rtdlab::cli
