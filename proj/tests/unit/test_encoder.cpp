#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "op_cases.hpp"
#include "oracles.hpp"
#include "rtdlab/autodiff/grad_check.hpp"
#include "rtdlab/model/encoder.hpp"

using namespace rtdlab;
using ad::Tensor;
using D = Tensor<double>;
using model::AttentionMode;
using model::EncoderConfig;

namespace {

EncoderConfig small_config(AttentionMode mode, std::size_t layers = 2) {
  EncoderConfig c;
  c.n_layers = layers;
  c.hidden = 8;
  c.n_heads = 2;
  c.ffn_inner = 16;
  c.max_rel_distance = 3;
  c.max_seq_len = 8;
  c.attention_mode = mode;
  return c;
}

text::TokenBatch batch_of(std::vector<text::TokenId> ids, std::size_t b, std::size_t s) {
  text::TokenBatch batch;
  batch.batch_size = b;
  batch.seq_len = s;
  batch.ids = std::move(ids);
  return batch;
}

D random_input(ad::Shape shape, std::uint64_t seed) {
  Rng rng = make_stream(seed, "input");
  return testing::random_tensor(std::move(shape), rng);
}

std::vector<double> vals(const D& t) { return {t.values().begin(), t.values().end()}; }

double max_abs_diff(const D& a, const D& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

// Plain-loop helpers for the attention oracle.
using Mat = std::vector<std::vector<double>>;

Mat to_mat(const D& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.values()[i * t.dim(1) + j];
  return m;
}

std::vector<double> affine(const std::vector<double>& x, const Mat& w, const D* b) {
  std::vector<double> out(w[0].size(), 0.0);
  for (std::size_t o = 0; o < out.size(); ++o) {
    double s = b ? b->values()[o] : 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w[i][o];
    out[o] = s;
  }
  return out;
}

double dot_head(const std::vector<double>& a, const std::vector<double>& b, std::size_t head, std::size_t d) {
  double s = 0.0;
  for (std::size_t t = head * d; t < (head + 1) * d; ++t) s += a[t] * b[t];
  return s;
}

// Direct evaluation of the documented disentangled score for one sequence:
// s(i,j) = q_i.k_j + q_i.kr[d(i,j)] + k_j.qr[d(j,i)], d clipped to +-(K-1).
Mat brute_force_attention(const Mat& x, const model::LayerParams<double>& l, const D& rel, const EncoderConfig& c) {
  const std::size_t S = x.size(), H = c.hidden, d = c.head_dim();
  const long K = static_cast<long>(c.max_rel_distance);
  auto wq = to_mat(l.wq), wk = to_mat(l.wk), wv = to_mat(l.wv), wo = to_mat(l.wo);
  auto wqr = to_mat(l.wq_rel), wkr = to_mat(l.wk_rel);
  auto P = to_mat(rel);
  Mat q, k, v, kr, qr;
  for (const auto& row : x) {
    q.push_back(affine(row, wq, &l.bq));
    k.push_back(affine(row, wk, &l.bk));
    v.push_back(affine(row, wv, &l.bv));
  }
  for (const auto& row : P) {
    kr.push_back(affine(row, wkr, nullptr));
    qr.push_back(affine(row, wqr, nullptr));
  }
  auto row_of = [K](long delta) {
    delta = std::max(-(K - 1), std::min(K - 1, delta));
    return static_cast<std::size_t>(delta + K - 1);
  };
  Mat mixed(S, std::vector<double>(H, 0.0));
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    for (std::size_t i = 0; i < S; ++i) {
      std::vector<double> s(S);
      for (std::size_t j = 0; j < S; ++j) {
        const long li = static_cast<long>(i), lj = static_cast<long>(j);
        s[j] = (dot_head(q[i], k[j], h, d) + dot_head(q[i], kr[row_of(li - lj)], h, d) +
                dot_head(k[j], qr[row_of(lj - li)], h, d)) /
               std::sqrt(3.0 * static_cast<double>(d));
      }
      const double lse = oracle::log_sum_exp(s);
      for (std::size_t j = 0; j < S; ++j) {
        const double p = std::exp(s[j] - lse);
        for (std::size_t t = h * d; t < (h + 1) * d; ++t) mixed[i][t] += p * v[j][t];
      }
    }
  }
  Mat out;
  for (const auto& row : mixed) out.push_back(affine(row, wo, &l.bo));
  return out;
}

void perturb(model::EncoderParams<double>& p, Rng& rng, double sd) {
  for (auto& n : p.named("p")) {
    auto t = n.tensor;
    for (auto& x : t.data()) x += normal(rng, 0.0, sd);
  }
}

}  // namespace

TEST_SUITE("encoder") {

TEST_CASE("embedding returns table rows and routes gradients to them") {
  D table({4, 3}, {0, 1, 2, 10, 11, 12, 20, 21, 22, 30, 31, 32}, true);
  auto out = model::embed(batch_of({2}, 1, 1), table);
  CHECK(vals(out) == std::vector<double>{20, 21, 22});
  ad::sum(out).backward();
  CHECK(table.grad_or_zero() == std::vector<double>{0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0});
  ad::Tape<double>::current().clear();

  table.zero_grad();
  ad::sum(model::embed(batch_of({2, 1, 2}, 1, 3), table)).backward();
  CHECK(table.grad_or_zero() == std::vector<double>{0, 0, 0, 1, 1, 1, 2, 2, 2, 0, 0, 0});
  ad::Tape<double>::current().clear();

  CHECK_THROWS(model::embed(batch_of({4}, 1, 1), table));
}

TEST_CASE("a single-token sequence attends only to itself") {
  for (auto mode : {AttentionMode::kStandard, AttentionMode::kDisentangled}) {
    auto cfg = small_config(mode, 1);
    Rng rng = make_stream(3, "init");
    auto p = model::init_encoder<double>(cfg, rng, 0.5);
    perturb(p, rng, 0.1);
    auto x = random_input({1, 1, cfg.hidden}, 4);
    auto ctx = model::make_context<double>(batch_of({7}, 1, 1), cfg);
    auto out = model::attention_forward(x, p.layers[0], p, cfg, ctx);
    auto expected = ad::add(ad::matmul(ad::add(ad::matmul(x, p.layers[0].wv), p.layers[0].bv), p.layers[0].wo),
                            p.layers[0].bo);
    CHECK(max_abs_diff(out, expected) < 1e-12);
  }
}

TEST_CASE("disentangled attention without position terms matches standard attention") {
  auto da = small_config(AttentionMode::kDisentangled, 1);
  auto sa = da;
  sa.attention_mode = AttentionMode::kStandard;
  Rng rng = make_stream(5, "init");
  auto p = model::init_encoder<double>(da, rng, 0.5);
  for (auto& x : p.rel_pos.data()) x = 0.0;
  for (auto& x : p.layers[0].wq_rel.data()) x = 0.0;
  for (auto& x : p.layers[0].wk_rel.data()) x = 0.0;
  auto batch = batch_of({2, 9, 10, 11, 3, 2, 12, 3, 0, 0}, 2, 5);
  auto x = random_input({2, 5, da.hidden}, 6);

  auto ctx_sa = model::make_context<double>(batch, sa);
  auto ctx_da = model::make_context<double>(batch, da);
  auto standard = model::attention_forward(x, p.layers[0], p, sa, ctx_sa);
  // Default scalings differ by sqrt(3), so the outputs should too.
  auto unscaled = model::attention_forward(x, p.layers[0], p, da, ctx_da);
  CHECK(max_abs_diff(standard, unscaled) > 1e-6);
  ctx_da.score_scale = 1.0 / std::sqrt(static_cast<double>(da.head_dim()));
  auto aligned = model::attention_forward(x, p.layers[0], p, da, ctx_da);
  CHECK(max_abs_diff(standard, aligned) < 1e-6);
}

TEST_CASE("disentangled attention matches a brute-force evaluation on three tokens") {
  auto cfg = small_config(AttentionMode::kDisentangled, 1);
  cfg.max_rel_distance = 2;  // distance 2 is clipped
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Rng rng = make_stream(seed, "init");
    auto p = model::init_encoder<double>(cfg, rng, 0.5);
    perturb(p, rng, 0.2);
    auto x = random_input({1, 3, cfg.hidden}, seed + 10);
    auto ctx = model::make_context<double>(batch_of({2, 9, 3}, 1, 3), cfg);
    auto out = model::attention_forward(x, p.layers[0], p, cfg, ctx);
    Mat rows(3, std::vector<double>(cfg.hidden));
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t t = 0; t < cfg.hidden; ++t) rows[i][t] = x.values()[i * cfg.hidden + t];
    auto expected = brute_force_attention(rows, p.layers[0], p.rel_pos, cfg);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t t = 0; t < cfg.hidden; ++t)
        CHECK(std::abs(out.values()[i * cfg.hidden + t] - expected[i][t]) < 1e-10);
  }
}

TEST_CASE("relative buckets clip at the maximum distance") {
  CHECK(model::relative_bucket(0, 0, 3) == 2);
  CHECK(model::relative_bucket(1, 0, 3) == 3);
  CHECK(model::relative_bucket(5, 0, 3) == 4);
  CHECK(model::relative_bucket(0, 5, 3) == 0);
}

TEST_CASE("an encoder with zero layers is the identity") {
  auto cfg = small_config(AttentionMode::kDisentangled, 0);
  Rng rng = make_stream(1, "init");
  auto p = model::init_encoder<double>(cfg, rng);
  auto x = random_input({2, 4, cfg.hidden}, 2);
  auto ctx = model::make_context<double>(batch_of({2, 9, 9, 3, 2, 9, 3, 0}, 2, 4), cfg);
  CHECK(vals(model::encoder_forward(x, p, cfg, ctx)) == vals(x));
}

TEST_CASE("encoder and head outputs have the documented shapes") {
  for (auto mode : {AttentionMode::kStandard, AttentionMode::kDisentangled}) {
    auto cfg = small_config(mode, 2);
    Rng rng = make_stream(1, "init");
    auto p = model::init_encoder<double>(cfg, rng);
    const std::size_t V = 20;
    auto table = model::init_matrix<double>(V, cfg.hidden, 0.02, rng);
    for (std::size_t S : {1u, 3u, 8u}) {
      std::vector<text::TokenId> ids(2 * S, 7);
      auto batch = batch_of(ids, 2, S);
      auto ctx = model::make_context<double>(batch, cfg);
      auto h = model::encoder_forward(model::embed_inputs(batch, table, p), p, cfg, ctx);
      CHECK(h.shape() == ad::Shape{2, S, cfg.hidden});
      auto mlm = model::mlm_head(h, table, model::init_mlm_head<double>(cfg.hidden, V, true, rng));
      CHECK(mlm.shape() == ad::Shape{2, S, V});
      CHECK(model::rtd_head(h, model::init_rtd_head<double>(cfg.hidden, rng)).shape() == ad::Shape{2, S});
    }
  }
}

TEST_CASE("layer-norm rows have zero mean and unit variance") {
  auto x = random_input({6, 16}, 9);
  auto y = ad::layer_norm(x, D::full({16}, 1.0), D::zeros({16}));
  for (std::size_t r = 0; r < 6; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 16; ++c) mean += y.values()[r * 16 + c];
    mean /= 16;
    for (std::size_t c = 0; c < 16; ++c) var += std::pow(y.values()[r * 16 + c] - mean, 2);
    var /= 16;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("padding keys do not influence real positions") {
  auto cfg = small_config(AttentionMode::kDisentangled, 2);
  Rng rng = make_stream(2, "init");
  auto p = model::init_encoder<double>(cfg, rng, 0.3);
  auto table = model::init_matrix<double>(20, cfg.hidden, 0.5, rng);
  auto a = batch_of({2, 9, 3, 0, 0}, 1, 5);
  auto b = batch_of({2, 9, 3, 0, 0}, 1, 5);
  auto ha = model::encoder_forward(model::embed_inputs(a, table, p), p, cfg, model::make_context<double>(a, cfg));
  // Same real tokens, different values at the padded rows.
  auto xb = model::embed_inputs(b, table, p);
  std::vector<double> shifted(xb.values().begin(), xb.values().end());
  for (std::size_t i = 3 * cfg.hidden; i < shifted.size(); ++i) shifted[i] += 5.0;
  auto hb = model::encoder_forward(D(xb.shape(), shifted), p, cfg, model::make_context<double>(b, cfg));
  for (std::size_t i = 0; i < 3 * cfg.hidden; ++i) CHECK(std::abs(ha.values()[i] - hb.values()[i]) < 1e-12);
}

TEST_CASE("mlm logits are normalizable and follow cosine with orthonormal embeddings") {
  const std::size_t H = 4, V = 4;
  Rng rng = make_stream(3, "init");
  auto head = model::init_mlm_head<double>(H, V, true, rng);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < H; ++j) head.dense_w.data()[i * H + j] = i == j ? 1.0 : 0.0;
  // Rows of a rotation: orthonormal.
  const double c = std::cos(0.3), s = std::sin(0.3);
  D table({V, H}, {c, s, 0, 0, -s, c, 0, 0, 0, 0, c, s, 0, 0, -s, c});
  auto h = random_input({1, 3, H}, 4);
  auto logits = model::mlm_head(h, table, head);
  auto t = ad::layer_norm(ad::gelu(h), head.ln_g, head.ln_b);
  for (std::size_t pos = 0; pos < 3; ++pos) {
    std::vector<double> tv(t.values().begin() + pos * H, t.values().begin() + (pos + 1) * H);
    std::vector<double> cos(V), lg(V);
    for (std::size_t v = 0; v < V; ++v) {
      cos[v] = oracle::cosine(tv, std::vector<double>(table.values().begin() + v * H,
                                                      table.values().begin() + (v + 1) * H));
      lg[v] = logits.values()[pos * V + v];
    }
    std::vector<std::size_t> by_cos(V), by_logit(V);
    std::iota(by_cos.begin(), by_cos.end(), 0);
    std::iota(by_logit.begin(), by_logit.end(), 0);
    std::sort(by_cos.begin(), by_cos.end(), [&](auto a, auto b) { return cos[a] < cos[b]; });
    std::sort(by_logit.begin(), by_logit.end(), [&](auto a, auto b) { return lg[a] < lg[b]; });
    CHECK(by_cos == by_logit);
  }
  auto probs = ad::softmax(logits);
  for (std::size_t pos = 0; pos < 3; ++pos) {
    double total = 0;
    for (std::size_t v = 0; v < V; ++v) total += probs.values()[pos * V + v];
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
  CHECK_THROWS_AS(model::mlm_head(h, D::zeros({V, H + 1}), head), ad::ShapeError);
}

TEST_CASE("an all-zero rtd head predicts one half everywhere") {
  Rng rng = make_stream(1, "init");
  auto head = model::init_rtd_head<double>(8, rng);
  for (auto& x : head.dense_w.data()) x = 0;
  for (auto& x : head.out_w.data()) x = 0;
  auto logits = model::rtd_head(random_input({2, 3, 8}, 1), head);
  CHECK(logits.shape() == ad::Shape{2, 3});
  for (double z : logits.values()) {
    CHECK(z == 0.0);
    CHECK(1.0 / (1.0 + std::exp(-z)) == 0.5);
  }
  CHECK_THROWS_AS(model::rtd_head(random_input({2, 3, 7}, 1), head), ad::ShapeError);
}

TEST_CASE("gradients reach every parameter of every layer") {
  for (auto mode : {AttentionMode::kStandard, AttentionMode::kDisentangled}) {
    auto cfg = small_config(mode, 3);
    Rng rng = make_stream(8, "init");
    auto p = model::init_encoder<double>(cfg, rng, 0.2);
    auto table = model::init_matrix<double>(30, cfg.hidden, 0.5, rng);
    auto head = model::init_rtd_head<double>(cfg.hidden, rng, 0.2);
    auto batch = batch_of({2, 11, 12, 13, 14, 3, 2, 20, 21, 22, 3, 0}, 2, 6);
    auto h = model::encoder_forward(model::embed_inputs(batch, table, p), p, cfg,
                                    model::make_context<double>(batch, cfg));
    auto logits = model::rtd_head(h, head);
    auto w = random_input(logits.shape(), 3);
    ad::sum(ad::mul(logits, w)).backward();
    for (auto& n : p.named("enc")) {
      CAPTURE(n.name);
      auto g = n.tensor.grad_or_zero();
      double norm = 0;
      for (double x : g) norm += x * x;
      CHECK(norm > 0.0);
    }
    ad::Tape<double>::current().clear();
  }
}

TEST_CASE("two-layer hidden-16 encoder passes the finite-difference check") {
  for (auto mode : {AttentionMode::kStandard, AttentionMode::kDisentangled}) {
    auto ec = testing::make_encoder_case(mode, 21, 2, 16);
    auto report = ad::grad_check(ec.builder, ec.leaves, 1e-4);
    CAPTURE(report.max_rel_err);
    CHECK(report.passed);
  }
}

TEST_CASE("generator shape follows half the discriminator depth") {
  auto disc = small_config(AttentionMode::kDisentangled, 3);
  auto gen = disc;
  gen.n_layers = 2;
  CHECK_NOTHROW(model::validate_generator_shape(gen, disc, false));
  gen.n_layers = 3;
  CHECK_THROWS_AS(model::validate_generator_shape(gen, disc, false), std::invalid_argument);
  CHECK_NOTHROW(model::validate_generator_shape(gen, disc, true));
  gen.n_layers = 2;
  gen.hidden = 16;
  gen.ffn_inner = 32;
  CHECK_THROWS_AS(model::validate_generator_shape(gen, disc, false), std::invalid_argument);
}

TEST_CASE("config validation names the offending field") {
  auto cfg = small_config(AttentionMode::kStandard);
  cfg.n_heads = 3;
  try {
    cfg.validate();
    FAIL("expected a validation error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("n_heads") != std::string::npos);
  }
  cfg = small_config(AttentionMode::kStandard);
  cfg.ffn_inner = 4;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("tied output weights take gradient from both lookup and projection") {
  const std::size_t H = 4, V = 6;
  Rng rng = make_stream(4, "init");
  auto head = model::init_mlm_head<double>(H, V, true, rng, 0.5);
  auto table = model::init_matrix<double>(V, H, 0.5, rng);
  auto batch = batch_of({2, 5, 3}, 1, 3);
  std::vector<ad::Index> targets = {5, 1, 2};

  auto loss_with = [&](const D& in_table, const D& out_table) {
    auto logits = model::mlm_head(model::embed(batch, in_table), out_table, head);
    return ad::cross_entropy(ad::reshape(logits, {3, V}), std::span<const ad::Index>(targets));
  };
  auto grad_of = [&](bool via_input, bool via_output) {
    table.zero_grad();
    auto frozen = table.detached_copy();
    loss_with(via_input ? table : frozen, via_output ? table : frozen).backward();
    ad::Tape<double>::current().clear();
    return table.grad_or_zero();
  };
  auto both = grad_of(true, true);
  auto input_only = grad_of(true, false);
  auto output_only = grad_of(false, true);
  double in_norm = 0, out_norm = 0;
  for (std::size_t i = 0; i < both.size(); ++i) {
    CHECK(both[i] == doctest::Approx(input_only[i] + output_only[i]).epsilon(1e-12));
    in_norm += input_only[i] * input_only[i];
    out_norm += output_only[i] * output_only[i];
  }
  CHECK(in_norm > 0);
  CHECK(out_norm > 0);

  // Changing the table changes the logits.
  auto before = vals(model::mlm_head(model::embed(batch, table), table, head));
  table.data()[0] += 0.5;
  CHECK(vals(model::mlm_head(model::embed(batch, table), table, head)) != before);
}

TEST_CASE("an untied head ignores the embedding table for its projection") {
  const std::size_t H = 4, V = 6;
  Rng rng = make_stream(4, "init");
  auto head = model::init_mlm_head<double>(H, V, false, rng, 0.5);
  CHECK(head.output.defined());
  auto h = random_input({1, 2, H}, 1);
  auto a = model::mlm_head(h, D::zeros({V, H}), head);
  auto b = model::mlm_head(h, random_input({V, H}, 2), head);
  CHECK(vals(a) == vals(b));
}

TEST_CASE("float and double encoders agree closely") {
  auto cfg = small_config(AttentionMode::kDisentangled, 2);
  Rng r1 = make_stream(1, "init");
  Rng r2 = make_stream(1, "init");
  auto pd = model::init_encoder<double>(cfg, r1, 0.3);
  auto pf = model::init_encoder<float>(cfg, r2, 0.3);
  auto batch = batch_of({2, 9, 10, 3}, 1, 4);
  auto td = model::init_matrix<double>(12, cfg.hidden, 0.5, r1);
  auto tf = model::init_matrix<float>(12, cfg.hidden, 0.5, r2);
  auto hd = model::encoder_forward(model::embed_inputs(batch, td, pd), pd, cfg, model::make_context<double>(batch, cfg));
  auto hf = model::encoder_forward(model::embed_inputs(batch, tf, pf), pf, cfg, model::make_context<float>(batch, cfg));
  for (std::size_t i = 0; i < hd.size(); ++i) CHECK(std::abs(hd.values()[i] - hf.values()[i]) < 1e-4);
}

}  // TEST_SUITE
