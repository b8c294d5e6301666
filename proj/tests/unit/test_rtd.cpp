#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "rtdlab/rtd/checkpoint.hpp"
#include "rtdlab/rtd/losses.hpp"
#include "rtdlab/rtd/optimizer.hpp"
#include "rtdlab/rtd/trainer.hpp"

using namespace rtdlab;
using namespace rtdlab::rtd;
using ad::Tensor;
using D = Tensor<double>;
using fixtures::same_bits;
using fixtures::tiny_config;
using fixtures::tiny_corpus;

namespace {

text::MaskedBatch masked_at(std::vector<text::TokenId> ids, std::size_t b, std::size_t s,
                            std::vector<std::vector<std::size_t>> positions) {
  text::TokenBatch batch{b, s, std::move(ids)};
  return text::masked_batch_from_positions(batch, batch, std::move(positions));
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("rtdlab_rtd_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::vector<std::vector<double>> snapshot(const model::ParamList<double>& params) {
  return model::snapshot_values(params);
}

bool same_snapshot(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!same_bits<double>(a[i], b[i])) return false;
  }
  return true;
}

std::vector<double> grad_of(const D& t) { return t.grad_or_zero(); }

double max_rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double scale = 0, diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max(scale, std::abs(b[i]));
    diff = std::max(diff, std::abs(a[i] - b[i]));
  }
  return diff / std::max(scale, 1e-300);
}

// Reads a checkpoint from the documented byte layout without using the
// library's reader; returns every record widened to double.
std::map<std::string, std::vector<double>> independent_read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto u = [&](int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf.at(pos + i)) << (8 * i);
    pos += bytes;
    return v;
  };
  REQUIRE(std::string(buf.begin(), buf.begin() + 8) == "RTDLCKPT");
  pos = 8;
  u(4);                // version
  u(8);                // step
  pos += u(4);         // header text
  const auto n = u(4);
  std::map<std::string, std::vector<double>> out;
  for (std::uint64_t r = 0; r < n; ++r) {
    const auto len = u(4);
    std::string name(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
    const auto dtype = u(1);
    const auto rank = u(1);
    std::uint64_t count = 1;
    for (std::uint64_t k = 0; k < rank; ++k) count *= u(8);
    std::vector<double> vals(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      if (dtype == 0) {
        const auto bits = static_cast<std::uint32_t>(u(4));
        float f;
        std::memcpy(&f, &bits, 4);
        vals[i] = f;
      } else {
        const auto bits = u(8);
        std::memcpy(&vals[i], &bits, 8);
      }
    }
    out[name] = std::move(vals);
  }
  REQUIRE(std::string(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.begin() + static_cast<std::ptrdiff_t>(pos + 8)) == "RTDLEND.");
  return out;
}

// Reproduces the random draws of the next step without advancing `state`.
struct StepInputs {
  text::MaskedBatch masked;
  text::TokenBatch x_tilde;
};

StepInputs replay_inputs(const ModelBundle<double>& bundle, const text::TokenBatch& batch, const TrainConfig& cfg,
                         const TrainState<double>& state) {
  Rng masking = state.masking_rng;
  Rng sampling = state.sampling_rng;
  ad::NoGradGuard no_grad;
  auto masked = text::mask_tokens(batch, cfg.masking, bundle.vocab_size, masking);
  auto logits = generator_logits(bundle, masked, nullptr);
  return {masked, sample_replacements(logits, masked, cfg.temperature, sampling)};
}

}  // namespace

TEST_SUITE("rtd") {

TEST_CASE("mlm loss matches the uniform, certain and worked examples") {
  auto one = masked_at({2, 7, 3}, 1, 3, {{1}});
  CHECK(mlm_loss(D({1, 8}, std::vector<double>(8, 0.0)), one).item() == doctest::Approx(2.0794415416798357).epsilon(1e-14));

  std::vector<double> certain(8, -1e3);
  certain[7] = 1e3;
  CHECK(mlm_loss(D({1, 8}, certain), one).item() < 1e-12);

  auto target2 = masked_at({2, 2, 3}, 1, 3, {{1}});
  CHECK(mlm_loss(D({1, 3}, {1, 2, 3}), target2).item() == doctest::Approx(0.40760596444438013).epsilon(1e-14));
  CHECK(mlm_loss(D({1, 3}, {1, 2, 3}), target2).item() ==
        doctest::Approx(oracle::log_sum_exp({1, 2, 3}) - 3.0).epsilon(1e-14));

  // Full (B,S,V) logits pick the masked rows.
  std::vector<double> full(3 * 3, 0.0);
  full[3] = 1, full[4] = 2, full[5] = 3;
  CHECK(mlm_loss(D({1, 3, 3}, full), target2).item() == doctest::Approx(0.40760596444438013).epsilon(1e-14));

  CHECK_THROWS_AS(mlm_loss(D({0, 3}, {}), masked_at({2, 9, 3}, 1, 3, {{}})), std::invalid_argument);
}

TEST_CASE("sampling copies unmasked positions and follows a point-mass generator") {
  Rng rng = make_stream(1, "sampling");
  auto none = masked_at({2, 6, 7, 3}, 1, 4, {{}});
  CHECK(sample_replacements(D({0, 10}, {}), none, 1.0, rng).ids == none.original.ids);

  auto two = masked_at({2, 6, 7, 3}, 1, 4, {{1, 2}});
  std::vector<double> logits(2 * 10, -1e4);
  logits[9] = logits[19] = 0.0;
  auto out = sample_replacements(D({2, 10}, logits), two, 1.0, rng);
  CHECK(out.ids == std::vector<text::TokenId>{2, 9, 9, 3});

  CHECK_THROWS(sample_replacements(D({2, 10}, logits), two, 0.0, rng));
  logits[0] = std::nan("");
  CHECK_THROWS(sample_replacements(D({2, 10}, logits), two, 1.0, rng));
}

TEST_CASE("sampled frequencies match the multinomial expectation") {
  const std::size_t rows = 100, cols = 1000, n = rows * cols;
  std::vector<std::vector<std::size_t>> all(rows);
  for (auto& r : all)
    for (std::size_t s = 0; s < cols; ++s) r.push_back(s);
  auto masked = masked_at(std::vector<text::TokenId>(n, 0), rows, cols, all);
  const std::vector<double> p = {0.5, 0.25, 0.25};
  std::vector<double> logits;
  for (std::size_t i = 0; i < n; ++i)
    for (double q : p) logits.push_back(std::log(q));
  Rng rng = make_stream(3, "sampling");
  auto out = sample_replacements(D({n, 3}, logits), masked, 1.0, rng);
  std::vector<double> counts(3, 0.0);
  for (auto id : out.ids) counts.at(static_cast<std::size_t>(id)) += 1;
  for (std::size_t k = 0; k < 3; ++k) {
    CAPTURE(k);
    CHECK(std::abs(counts[k] - n * p[k]) < 3 * oracle::binomial_sd(n, p[k]));
  }
}

TEST_CASE("sampling does not touch the tape") {
  auto cfg = tiny_config(SharingMode::kES);
  auto bundle = init_bundle<double>(cfg, tiny_corpus().vocab.size());
  auto batch = fixtures::first_batch(4);
  Rng m = make_stream(1, "masking");
  auto masked = text::mask_tokens(batch, cfg.masking, bundle.vocab_size, m);
  auto logits = generator_logits(bundle, masked, nullptr);
  const auto before = ad::Tape<double>::current().size();
  Rng s1 = make_stream(1, "sampling");
  auto x1 = sample_replacements(logits, masked, 1.0, s1);
  CHECK(ad::Tape<double>::current().size() == before);
  // Perturbing the discriminator cannot change the samples.
  for (auto& x : bundle.rtd.out_w.data()) x += 1.0;
  for (auto& x : bundle.disc_body.layers[0].wq.data()) x += 1.0;
  Rng s2 = make_stream(1, "sampling");
  CHECK(sample_replacements(generator_logits(bundle, masked, nullptr), masked, 1.0, s2).ids == x1.ids);
  ad::Tape<double>::current().clear();
}

TEST_CASE("labels mark only changed positions as replaced") {
  auto masked = masked_at({10, 11, 12, 13}, 1, 4, {{1}});
  CHECK(rtd_labels(masked, masked.original) == std::vector<double>{1, 1, 1, 1});
  text::TokenBatch swapped{1, 4, {10, 20, 12, 13}};
  CHECK(rtd_labels(masked, swapped) == std::vector<double>{1, 0, 1, 1});
  // A masked position that resamples its own token counts as original.
  text::TokenBatch same{1, 4, {10, 11, 12, 13}};
  CHECK(rtd_labels(masked, same)[1] == 1.0);
  CHECK_THROWS(rtd_labels(masked, text::TokenBatch{1, 3, {1, 2, 3}}));
}

TEST_CASE("rtd loss matches the zero, worked and saturated examples") {
  const std::vector<double> ones(3, 1.0);
  CHECK(rtd_loss(D({1, 3}, {0, 0, 0}), std::vector<double>{1, 0, 1}, ones).item() ==
        doctest::Approx(0.6931471805599453).epsilon(1e-14));
  CHECK(rtd_loss(D({1, 3}, {0, 0, 0}), std::vector<double>{0, 0, 0}, ones).item() ==
        doctest::Approx(0.6931471805599453).epsilon(1e-14));
  const double worked = rtd_loss(D({1, 3}, {2, -1, 0}), std::vector<double>{1, 0, 1}, ones).item();
  CHECK(worked == doctest::Approx(0.3777789597070469).epsilon(1e-13));
  CHECK(worked == doctest::Approx((oracle::bce(2, 1) + oracle::bce(-1, 0) + oracle::bce(0, 1)) / 3).epsilon(1e-13));
  CHECK(rtd_loss(D({1, 2}, {30, -30}), std::vector<double>{1, 0}, std::vector<double>{1, 1}).item() < 1e-12);
  // Padding is excluded from the mean.
  CHECK(rtd_loss(D({1, 4}, {2, -1, 0, 50}), std::vector<double>{1, 0, 1, 0}, std::vector<double>{1, 1, 1, 0}).item() ==
        doctest::Approx(0.3777789597070469).epsilon(1e-13));
}

TEST_CASE("bundles hold the tables their mode requires") {
  const auto V = tiny_corpus().vocab.size();
  auto es = init_bundle<double>(tiny_config(SharingMode::kES), V);
  auto nes = init_bundle<double>(tiny_config(SharingMode::kNES), V);
  auto gdes = init_bundle<double>(tiny_config(SharingMode::kGDES), V);
  CHECK(!es.E_D.defined());
  CHECK(!es.E_delta.defined());
  CHECK(nes.E_D.defined());
  CHECK(!nes.E_delta.defined());
  CHECK(!gdes.E_D.defined());
  for (double x : gdes.E_delta.values()) CHECK(x == 0.0);
  // The generator comes from its own stream in every mode.
  CHECK(same_snapshot(snapshot(es.generator_params()), snapshot(gdes.generator_params())));
  CHECK(same_snapshot(snapshot(nes.generator_params()), snapshot(gdes.generator_params())));
  // At initialization GDES embeds the discriminator input through E_G exactly.
  auto table = gdes.discriminator_table();
  CHECK(same_bits<double>(table.values(), gdes.E_G.values()));
  ad::Tape<double>::current().clear();
}

TEST_CASE("ES with lambda zero gives E_G the pure MLM gradient") {
  auto cfg = tiny_config(SharingMode::kES);
  cfg.lambda = 0.0;
  auto bundle = init_bundle<double>(cfg, tiny_corpus().vocab.size());
  auto state = make_train_state(bundle, cfg);
  auto batch = fixtures::first_batch(4);
  auto oracle_bundle = clone_bundle(bundle);
  auto inputs = replay_inputs(oracle_bundle, batch, cfg, state);

  std::vector<double> joint;
  state.on_gradients = [&](StepPhase) { joint = grad_of(bundle.E_G); };
  train_step(bundle, batch, cfg, state);

  {
    ad::TrainingModeGuard training(true);
    mlm_loss(generator_logits(oracle_bundle, inputs.masked, nullptr), inputs.masked).backward();
    ad::Tape<double>::current().clear();
  }
  auto mlm_only = grad_of(oracle_bundle.E_G);
  REQUIRE(joint.size() == mlm_only.size());
  CHECK(max_rel_diff(joint, mlm_only) < 1e-10);
}

TEST_CASE("ES joint gradient on E_G is the sum of the task gradients") {
  for (double lambda : {1.0, 50.0}) {
    auto cfg = tiny_config(SharingMode::kES, 3);
    cfg.lambda = lambda;
    auto bundle = init_bundle<double>(cfg, tiny_corpus().vocab.size());
    auto state = make_train_state(bundle, cfg);
    auto batch = fixtures::first_batch(4, 8);
    auto oracle_bundle = clone_bundle(bundle);
    auto inputs = replay_inputs(oracle_bundle, batch, cfg, state);

    std::vector<double> joint;
    state.on_gradients = [&](StepPhase) { joint = grad_of(bundle.E_G); };
    auto before = snapshot(bundle.all_params());
    train_step(bundle, batch, cfg, state);

    ad::TrainingModeGuard training(true);
    mlm_loss(generator_logits(oracle_bundle, inputs.masked, nullptr), inputs.masked).backward();
    ad::Tape<double>::current().clear();
    auto g_mlm = grad_of(oracle_bundle.E_G);
    oracle_bundle.E_G.zero_grad();
    auto labels = rtd_labels(inputs.masked, inputs.x_tilde);
    auto weights = inputs.masked.original.non_pad_weights();
    rtd_loss(discriminator_logits(oracle_bundle, oracle_bundle.E_G, inputs.masked, inputs.x_tilde, nullptr), labels,
             weights)
        .backward();
    ad::Tape<double>::current().clear();
    auto g_rtd = grad_of(oracle_bundle.E_G);
    std::vector<double> expected(g_mlm.size());
    for (std::size_t i = 0; i < expected.size(); ++i) expected[i] = g_mlm[i] + lambda * g_rtd[i];
    CAPTURE(lambda);
    CHECK(max_rel_diff(joint, expected) < 1e-10);

    // Every parameter with a nonzero gradient moved.
    auto after = snapshot(bundle.all_params());
    auto params = bundle.all_params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      CAPTURE(params[i].name);
      CHECK(!same_bits<double>(before[i], after[i]));
    }
  }
}

TEST_CASE("NES phases touch disjoint parameters") {
  auto cfg = tiny_config(SharingMode::kNES, 2);
  auto bundle = init_bundle<double>(cfg, tiny_corpus().vocab.size());
  auto state = make_train_state(bundle, cfg);
  auto batch = fixtures::first_batch(4, 4);
  auto oracle_bundle = clone_bundle(bundle);
  auto inputs = replay_inputs(oracle_bundle, batch, cfg, state);

  auto disc_before = snapshot(bundle.discriminator_params());
  std::vector<std::vector<double>> disc_mid, gen_mid;
  std::vector<double> ed_grad;
  state.on_gradients = [&](StepPhase phase) {
    if (phase == StepPhase::kDiscriminator) {
      disc_mid = snapshot(bundle.discriminator_params());
      gen_mid = snapshot(bundle.generator_params());
      ed_grad = grad_of(bundle.E_D);
    }
  };
  train_step(bundle, batch, cfg, state);
  CHECK(same_snapshot(disc_before, disc_mid));
  CHECK(same_snapshot(gen_mid, snapshot(bundle.generator_params())));

  // Standalone lambda * dL_RTD/dE_D on the untouched discriminator.
  ad::TrainingModeGuard training(true);
  auto labels = rtd_labels(inputs.masked, inputs.x_tilde);
  auto weights = inputs.masked.original.non_pad_weights();
  ad::scale(rtd_loss(discriminator_logits(oracle_bundle, oracle_bundle.E_D, inputs.masked, inputs.x_tilde, nullptr),
                     labels, weights),
            cfg.lambda)
      .backward();
  ad::Tape<double>::current().clear();
  CHECK(max_rel_diff(ed_grad, grad_of(oracle_bundle.E_D)) < 1e-10);
}

TEST_CASE("without the RTD phase the generator follows a pure MLM run") {
  for (auto mode : {SharingMode::kNES, SharingMode::kGDES}) {
    auto cfg = tiny_config(mode, 4);
    const auto V = tiny_corpus().vocab.size();
    auto bundle = init_bundle<double>(cfg, V);
    auto state = make_train_state(bundle, cfg);
    state.rtd_phase = false;

    // Hand-rolled MLM-only loop with the same streams.
    auto reference = clone_bundle(bundle);
    auto gp = reference.generator_params();
    AdamW<double> opt(gp, default_decay_mask(gp), AdamWSettings::from(cfg));
    Rng masking = make_stream(cfg.seed, "masking");

    text::BatchStream s1(tiny_corpus().sequences, cfg.batch_size, make_stream(cfg.seed, "data"));
    text::BatchStream s2(tiny_corpus().sequences, cfg.batch_size, make_stream(cfg.seed, "data"));
    for (std::size_t step = 1; step <= 5; ++step) {
      train_step(bundle, s1.next(), cfg, state);
      ad::TrainingModeGuard training(true);
      auto masked = text::mask_tokens(s2.next(), cfg.masking, V, masking);
      model::zero_grads(gp);
      mlm_loss(generator_logits(reference, masked, nullptr), masked).backward();
      ad::Tape<double>::current().clear();
      opt.step(lr_schedule(step, cfg));
    }
    CHECK(same_snapshot(snapshot(bundle.generator_params()), snapshot(reference.generator_params())));
  }
}

TEST_CASE("GDES leaves E_G untouched in the discriminator phase") {
  auto cfg = tiny_config(SharingMode::kGDES, 5);
  auto bundle = init_bundle<double>(cfg, tiny_corpus().vocab.size());
  auto state = make_train_state(bundle, cfg);
  text::BatchStream stream(tiny_corpus().sequences, cfg.batch_size, make_stream(cfg.seed, "data"));
  for (int i = 0; i < 3; ++i) {
    std::vector<double> eg_mid, eg_grad;
    bool delta_moved = false;
    state.on_gradients = [&](StepPhase phase) {
      if (phase == StepPhase::kDiscriminator) {
        eg_mid.assign(bundle.E_G.values().begin(), bundle.E_G.values().end());
        eg_grad = grad_of(bundle.E_G);
        for (double g : grad_of(bundle.E_delta)) delta_moved |= g != 0.0;
      }
    };
    train_step(bundle, stream.next(), cfg, state);
    for (double g : eg_grad) REQUIRE(g == 0.0);
    CHECK(same_bits<double>(eg_mid, bundle.E_G.values()));
    CHECK(delta_moved);
  }
}

TEST_CASE("NES and GDES generators stay bitwise identical for 100 steps") {
  auto nes_cfg = tiny_config(SharingMode::kNES, 6);
  auto gdes_cfg = tiny_config(SharingMode::kGDES, 6);
  nes_cfg.max_steps = gdes_cfg.max_steps = 100;
  nes_cfg.warmup_steps = gdes_cfg.warmup_steps = 10;
  const auto V = tiny_corpus().vocab.size();
  auto nes = init_bundle<double>(nes_cfg, V);
  auto gdes = init_bundle<double>(gdes_cfg, V);
  auto ns = make_train_state(nes, nes_cfg);
  auto gs = make_train_state(gdes, gdes_cfg);
  text::BatchStream s1(tiny_corpus().sequences, nes_cfg.batch_size, make_stream(6, "data"));
  text::BatchStream s2(tiny_corpus().sequences, gdes_cfg.batch_size, make_stream(6, "data"));
  bool identical = true;
  for (int step = 0; step < 100 && identical; ++step) {
    train_step(nes, s1.next(), nes_cfg, ns);
    train_step(gdes, s2.next(), gdes_cfg, gs);
    identical = same_snapshot(snapshot(nes.generator_params()), snapshot(gdes.generator_params()));
  }
  CHECK(identical);
  // The discriminators, by contrast, have diverged.
  CHECK(!same_bits<double>(nes.E_D.values(), std::span<const double>(gdes.materialized_discriminator_table())));
}

TEST_CASE("AdamW matches the hand-evaluated updates") {
  auto run = [](double theta, double grad, double lr, AdamWSettings s) {
    D p({1}, {theta}, true);
    if (grad != 0.0) p.grad_mut()[0] = grad;
    AdamW<double> opt({{"p", p}}, {true}, s);
    opt.step(lr);
    return p.values()[0];
  };
  CHECK(run(0.7, 0.0, 0.1, {0.9, 0.98, 1e-6, 0.0, 1.0}) == 0.7);
  CHECK(run(1.0, 0.0, 0.1, {0.9, 0.98, 1e-6, 0.01, 1.0}) == doctest::Approx(0.999).epsilon(1e-15));
  CHECK(run(0.0, 1.0, 1e-3, {0.9, 0.98, 1e-6, 0.0, 0.0}) == doctest::Approx(-0.0009999990000010002).epsilon(1e-12));

  // Clipping scales the gradient to the configured norm.
  D a({2}, {0.0, 0.0}, true);
  a.grad_mut()[0] = 3.0;
  a.grad_mut()[1] = 4.0;
  AdamW<double> clipped({{"a", a}}, {false}, {0.9, 0.98, 1e-6, 0.0, 1.0});
  auto info = clipped.step(1e-3);
  CHECK(info.grad_norm == doctest::Approx(5.0));
  CHECK(info.clip_scale == doctest::Approx(0.2));

  D bad({1}, {0.0}, true);
  bad.grad_mut()[0] = std::nan("");
  AdamW<double> guarded({{"bad", bad}}, {false}, {});
  CHECK_THROWS_AS(guarded.step(1e-3), std::domain_error);
}

TEST_CASE("AdamW direction is invariant to gradient scale as eps vanishes") {
  Rng rng = make_stream(1, "adam");
  std::vector<double> g(20), theta(20);
  for (auto& x : g) x = normal(rng);
  for (auto& x : theta) x = normal(rng);
  auto run = [&](double c) {
    D p({20}, theta, true);
    AdamW<double> opt({{"p", p}}, {false}, {0.9, 0.98, 1e-12, 0.0, 0.0});
    for (int step = 0; step < 3; ++step) {
      p.zero_grad();
      auto gm = p.grad_mut();
      for (std::size_t i = 0; i < 20; ++i) gm[i] = c * g[i] * (1.0 + 0.1 * step);
      opt.step(1e-2);
    }
    return std::vector<double>(p.values().begin(), p.values().end());
  };
  auto base = run(1.0);
  for (double c : {1e-3, 7.0, 1e4}) {
    auto scaled = run(c);
    for (std::size_t i = 0; i < 20; ++i) CHECK(std::abs(scaled[i] - base[i]) < 1e-6);
  }
}

TEST_CASE("the learning-rate schedule ramps up then decays linearly") {
  TrainConfig c;
  c.lr_peak = 1e-3;
  c.warmup_steps = 10;
  c.max_steps = 110;
  CHECK(lr_schedule(0, c) == 0.0);
  CHECK(lr_schedule(5, c) == doctest::Approx(5e-4));
  CHECK(lr_schedule(10, c) == doctest::Approx(1e-3));
  CHECK(lr_schedule(60, c) == doctest::Approx(5e-4));
  CHECK(lr_schedule(110, c) == 0.0);
}

TEST_CASE("config validation names the offending field") {
  auto check_field = [](TrainConfig c, const std::string& field) {
    try {
      c.validate();
      FAIL("expected a config error");
    } catch (const ConfigError& e) {
      CHECK(e.field() == field);
    }
  };
  TrainConfig c;
  c.lambda = -1;
  check_field(c, "lambda");
  c = TrainConfig{};
  c.warmup_steps = c.max_steps + 1;
  check_field(c, "warmup_steps");
  CHECK_NOTHROW(TrainConfig{}.validate());
}

TEST_CASE("flat configs round-trip") {
  auto c = tiny_config(SharingMode::kNES, 9);
  c.lambda = 12.5;
  TrainConfig back;
  for (const auto& [k, v] : to_flat(c)) apply_flat(back, k, v);
  CHECK(to_flat(back) == to_flat(c));
  CHECK_THROWS_AS(apply_flat(back, "no.such.key", "1"), ConfigError);
  CHECK_THROWS_AS(apply_flat(back, "lambda", "abc"), ConfigError);
}

TEST_CASE("checkpoints round-trip and the GDES export folds in the residual") {
  auto dir = temp_dir("ckpt");
  auto cfg = tiny_config(SharingMode::kGDES, 7);
  auto bundle = init_bundle<double>(cfg, tiny_corpus().vocab.size());

  // With a zero residual the exported table is E_G bit for bit.
  export_discriminator(bundle, cfg, 0, dir / "init.bin");
  auto init = read_checkpoint(dir / "init.bin");
  CHECK(init.record("discriminator.embeddings").values ==
        std::vector<double>(bundle.E_G.values().begin(), bundle.E_G.values().end()));

  auto state = make_train_state(bundle, cfg);
  text::BatchStream stream(tiny_corpus().sequences, cfg.batch_size, make_stream(7, "data"));
  for (int i = 0; i < 3; ++i) train_step(bundle, stream.next(), cfg, state);
  export_discriminator(bundle, cfg, 3, dir / "trained.bin");

  auto raw = independent_read(dir / "trained.bin");
  const auto& eg = raw.at("generator.embeddings");
  const auto& delta = raw.at("discriminator.embedding_delta");
  const auto& ed = raw.at("discriminator.embeddings");
  bool nonzero_delta = false;
  for (std::size_t i = 0; i < ed.size(); ++i) {
    CHECK(ed[i] == eg[i] + delta[i]);
    nonzero_delta |= delta[i] != 0.0;
  }
  CHECK(nonzero_delta);

  // Loading reproduces the discriminator logits exactly.
  auto loaded = bundle_from_checkpoint<double>(read_checkpoint(dir / "trained.bin"));
  auto batch = fixtures::first_batch(3);
  Rng m = make_stream(1, "masking");
  auto masked = text::mask_tokens(batch, cfg.masking, bundle.vocab_size, m);
  ad::NoGradGuard no_grad;
  auto a = discriminator_logits(bundle, bundle.discriminator_table(), masked, batch, nullptr);
  auto b = discriminator_logits(loaded, loaded.discriminator_table(), masked, batch, nullptr);
  CHECK(same_bits<double>(a.values(), b.values()));
  auto disc = load_discriminator<double>(read_checkpoint(dir / "trained.bin"));
  CHECK(same_bits<double>(disc.embeddings.values(), std::span<const double>(bundle.materialized_discriminator_table())));
  std::filesystem::remove_all(dir);
}

TEST_CASE("ES and NES exports store the table the discriminator used") {
  auto dir = temp_dir("export");
  for (auto mode : {SharingMode::kES, SharingMode::kNES}) {
    auto cfg = tiny_config(mode, 2);
    auto bundle = init_bundle<double>(cfg, tiny_corpus().vocab.size());
    export_discriminator(bundle, cfg, 0, dir / "x.bin");
    auto ck = read_checkpoint(dir / "x.bin");
    const auto& expected = mode == SharingMode::kES ? bundle.E_G : bundle.E_D;
    CHECK(ck.record("discriminator.embeddings").values ==
          std::vector<double>(expected.values().begin(), expected.values().end()));
    CHECK(!discriminator_only(ck).has("generator.embeddings"));
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("float checkpoints keep their values exactly") {
  auto dir = temp_dir("float");
  auto cfg = tiny_config(SharingMode::kNES, 3);
  auto bundle = init_bundle<float>(cfg, tiny_corpus().vocab.size());
  save_checkpoint(bundle, cfg, 0, dir / "f.bin");
  auto back = bundle_from_checkpoint<float>(read_checkpoint(dir / "f.bin"));
  auto a = model::snapshot_values(bundle.all_params());
  auto b = model::snapshot_values(back.all_params());
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(same_bits<float>(a[i], b[i]));
  std::filesystem::remove_all(dir);
}

TEST_CASE("truncated or missing checkpoints raise distinct errors") {
  auto dir = temp_dir("trunc");
  auto cfg = tiny_config(SharingMode::kGDES, 1);
  auto bundle = init_bundle<double>(cfg, tiny_corpus().vocab.size());
  save_checkpoint(bundle, cfg, 0, dir / "full.bin");
  const auto size = std::filesystem::file_size(dir / "full.bin");
  std::filesystem::copy_file(dir / "full.bin", dir / "cut.bin");
  std::filesystem::resize_file(dir / "cut.bin", size / 2);
  try {
    read_checkpoint(dir / "cut.bin");
    FAIL("expected a checkpoint error");
  } catch (const CheckpointError& e) {
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    CHECK(std::string(e.what()).find("'") != std::string::npos);
  }
  CHECK_THROWS_AS(read_checkpoint(dir / "absent.bin"), std::ios_base::failure);
  {
    std::ofstream junk(dir / "junk.bin", std::ios::binary);
    junk << "not a checkpoint at all";
  }
  CHECK_THROWS_AS(read_checkpoint(dir / "junk.bin"), CheckpointError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("zero steps write only the initial checkpoint") {
  auto dir = temp_dir("zero");
  auto cfg = tiny_config(SharingMode::kGDES);
  cfg.max_steps = 0;
  cfg.warmup_steps = 0;
  auto result = pretrain<double>(cfg, tiny_corpus().sequences, tiny_corpus().vocab.size(), {dir, 0, {}});
  CHECK(result.metrics.empty());
  CHECK(std::filesystem::exists(dir / "checkpoint-init.bin"));
  CHECK(!std::filesystem::exists(dir / "checkpoint-final.bin"));
  std::ifstream metrics(dir / "metrics.csv");
  std::string header, extra;
  std::getline(metrics, header);
  CHECK(header == "step,loss_mlm,loss_rtd,lr,grad_norm_G,grad_norm_D");
  CHECK(!std::getline(metrics, extra));
  std::filesystem::remove_all(dir);
}

TEST_CASE("pretraining is deterministic per seed and writes periodic checkpoints") {
  auto dir = temp_dir("det");
  auto cfg = tiny_config(SharingMode::kGDES, 8);
  auto a = pretrain<double>(cfg, tiny_corpus().sequences, tiny_corpus().vocab.size(), {dir, 4, {}});
  auto b = pretrain<double>(cfg, tiny_corpus().sequences, tiny_corpus().vocab.size());
  REQUIRE(a.metrics.size() == b.metrics.size());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    CHECK(a.metrics[i].loss_mlm == b.metrics[i].loss_mlm);
    CHECK(a.metrics[i].loss_rtd == b.metrics[i].loss_rtd);
    CHECK(a.metrics[i].grad_norm_G == b.metrics[i].grad_norm_G);
    CHECK(a.metrics[i].grad_norm_D == b.metrics[i].grad_norm_D);
  }
  CHECK(std::filesystem::exists(dir / "checkpoint-4.bin"));
  CHECK(std::filesystem::exists(dir / "checkpoint-8.bin"));
  CHECK(std::filesystem::exists(dir / "checkpoint-final.bin"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("initial losses sit near their uninformed values") {
  const std::size_t V = 512;
  auto lines = text::document_lines(text::corpus_synth(2, 30000, "default"));
  auto vocab = text::build_vocab(lines, V);
  auto seqs = text::pretraining_sequences(vocab, lines, 16);
  for (auto mode : kAllModes) {
    auto cfg = tiny_config(mode, 11);
    cfg.max_steps = 1;
    cfg.warmup_steps = 1;
    auto r = pretrain<float>(cfg, seqs, vocab.size());
    CHECK(std::abs(r.metrics[0].loss_mlm / std::log(static_cast<double>(vocab.size())) - 1.0) < 0.15);
    CHECK(std::abs(r.metrics[0].loss_rtd / std::log(2.0) - 1.0) < 0.15);
  }
}

TEST_CASE("a non-finite loss aborts with the step in the message") {
  auto cfg = tiny_config(SharingMode::kES);
  auto bundle = init_bundle<double>(cfg, tiny_corpus().vocab.size());
  auto state = make_train_state(bundle, cfg);
  bundle.rtd.out_b.data()[0] = std::nan("");
  try {
    train_step(bundle, fixtures::first_batch(4), cfg, state);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.step() == 1);
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}

}  // TEST_SUITE
