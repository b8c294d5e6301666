#include "rtdlab/diag/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "rtdlab/rtd/losses.hpp"
#include "rtdlab/util/csv.hpp"
#include "rtdlab/util/rng.hpp"

namespace rtdlab::diag {

std::vector<std::size_t> sample_rows(std::size_t rows, std::size_t first_row, double sample_fraction,
                                     std::uint64_t seed) {
  if (!(sample_fraction > 0.0)) throw std::invalid_argument("sample fraction must be > 0");
  std::vector<std::size_t> idx;
  for (std::size_t r = first_row; r < rows; ++r) idx.push_back(r);
  if (sample_fraction >= 1.0) return idx;
  const auto want = static_cast<std::size_t>(std::llround(sample_fraction * static_cast<double>(idx.size())));
  Rng rng = make_stream(seed, "cosine.sample");
  for (std::size_t i = 0; i < want && i < idx.size(); ++i) {
    const auto j = i + static_cast<std::size_t>(uniform_below(rng, idx.size() - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(std::min(want, idx.size()));
  std::sort(idx.begin(), idx.end());
  return idx;
}

namespace {

std::optional<double> mean_pairwise_cosine(std::span<const double> table, std::size_t width,
                                           const std::vector<std::size_t>& rows) {
  std::vector<std::vector<double>> unit;
  for (auto r : rows) {
    const double* row = table.data() + r * width;
    double sq = 0.0;
    for (std::size_t j = 0; j < width; ++j) sq += row[j] * row[j];
    if (sq == 0.0) continue;
    const double inv = 1.0 / std::sqrt(sq);
    std::vector<double> u(width);
    for (std::size_t j = 0; j < width; ++j) u[j] = row[j] * inv;
    unit.push_back(std::move(u));
  }
  const std::size_t n = unit.size();
  if (n < 2) return std::nullopt;
  double total = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < width; ++j) dot += unit[a][j] * unit[b][j];
      total += dot;
    }
  }
  return total / (static_cast<double>(n) * static_cast<double>(n - 1) / 2.0);
}

template <typename T>
std::vector<double> widen(std::span<const T> v) {
  return {v.begin(), v.end()};
}

std::string opt_text(const std::optional<double>& v) {
  if (!v) return "-";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10f", *v);
  return buf;
}

CosineReport report_from_tables(rtd::SharingMode mode, std::size_t rows, std::size_t width,
                                const std::vector<double>& eg, const std::vector<double>& ed,
                                const std::vector<double>* edelta, double fraction, std::uint64_t seed) {
  CosineReport r;
  r.mode = mode;
  r.sample_fraction = std::min(fraction, 1.0);
  r.seed = seed;
  const auto picked = sample_rows(rows, static_cast<std::size_t>(text::kNumSpecial), fraction, seed);
  r.sim_EG = mean_pairwise_cosine(eg, width, picked);
  r.sim_ED = mode == rtd::SharingMode::kES ? r.sim_EG : mean_pairwise_cosine(ed, width, picked);
  if (edelta != nullptr) r.sim_Edelta = mean_pairwise_cosine(*edelta, width, picked);
  return r;
}

double norm(const std::vector<double>& v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  return std::sqrt(sq);
}

}  // namespace

std::optional<double> avg_cosine_similarity(std::span<const double> table, std::size_t rows, std::size_t width,
                                            double sample_fraction, std::uint64_t seed, std::size_t first_row) {
  if (table.size() != rows * width) throw std::invalid_argument("avg_cosine_similarity: table size mismatch");
  return mean_pairwise_cosine(table, width, sample_rows(rows, first_row, sample_fraction, seed));
}

std::string CosineReport::to_text() const {
  std::ostringstream out;
  out << "mode=" << rtd::to_string(mode) << "\n";
  out << "sim_EG=" << opt_text(sim_EG) << "\n";
  out << "sim_ED=" << opt_text(sim_ED) << "\n";
  out << "sim_Edelta=" << opt_text(sim_Edelta) << "\n";
  out << "sample_fraction=" << format_number(sample_fraction) << "\n";
  out << "seed=" << seed << "\n";
  out << "sampling_free=" << (sampling_free() ? "true" : "false") << "\n";
  return out.str();
}

template <typename T>
CosineReport cosine_report(const rtd::ModelBundle<T>& bundle, double sample_fraction, std::uint64_t seed) {
  const std::size_t rows = bundle.E_G.dim(0), width = bundle.E_G.dim(1);
  const auto eg = widen(bundle.E_G.values());
  const auto ed_t = bundle.materialized_discriminator_table();
  const std::vector<double> ed(ed_t.begin(), ed_t.end());
  if (bundle.mode == rtd::SharingMode::kGDES) {
    const auto delta = widen(bundle.E_delta.values());
    return report_from_tables(bundle.mode, rows, width, eg, ed, &delta, sample_fraction, seed);
  }
  return report_from_tables(bundle.mode, rows, width, eg, ed, nullptr, sample_fraction, seed);
}

CosineReport cosine_report(const rtd::Checkpoint& c, double sample_fraction, std::uint64_t seed) {
  const auto& eg = c.record("generator.embeddings");
  const auto& ed = c.record("discriminator.embeddings");
  if (eg.shape.size() != 2 || ed.shape != eg.shape) {
    throw rtd::CheckpointError("embedding records have inconsistent shapes");
  }
  const std::vector<double>* delta = nullptr;
  if (c.config.mode == rtd::SharingMode::kGDES) delta = &c.record("discriminator.embedding_delta").values;
  return report_from_tables(c.config.mode, eg.shape[0], eg.shape[1], eg.values, ed.values, delta, sample_fraction,
                            seed);
}

std::string InterferenceProbe::to_text() const {
  std::ostringstream out;
  out << "step=" << step << "\n";
  out << "cos_angle=" << opt_text(cos_angle) << "\n";
  out << "norm_mlm=" << format_number(norm_mlm) << "\n";
  out << "norm_rtd=" << format_number(norm_rtd) << "\n";
  return out.str();
}

template <typename T>
InterferenceProbe gradient_interference(ad::Tensor<T> table, const std::function<ad::Tensor<T>()>& loss_a,
                                        const std::function<ad::Tensor<T>()>& loss_b) {
  auto& tape = ad::Tape<T>::current();
  const auto saved = table.grad_or_zero();
  auto pass = [&](const std::function<ad::Tensor<T>()>& build) {
    tape.clear();
    table.zero_grad();
    build().backward();
    tape.clear();
    auto g = table.grad_or_zero();
    return std::vector<double>(g.begin(), g.end());
  };
  InterferenceProbe p;
  p.grad_mlm = pass(loss_a);
  p.grad_rtd = pass(loss_b);
  std::copy(saved.begin(), saved.end(), table.grad_mut().begin());
  p.norm_mlm = norm(p.grad_mlm);
  p.norm_rtd = norm(p.grad_rtd);
  if (p.norm_mlm > 0.0 && p.norm_rtd > 0.0) {
    double dot = 0.0;
    for (std::size_t i = 0; i < p.grad_mlm.size(); ++i) dot += p.grad_mlm[i] * p.grad_rtd[i];
    p.cos_angle = std::clamp(dot / (p.norm_mlm * p.norm_rtd), -1.0, 1.0);
  }
  return p;
}

template <typename T>
InterferenceProbe interference_probe(const rtd::ModelBundle<T>& bundle, const text::MaskedBatch& batch,
                                     const text::TokenBatch& x_tilde, double lambda) {
  if (bundle.mode == rtd::SharingMode::kNES) {
    throw std::invalid_argument("interference_probe: NES has no shared embedding table");
  }
  auto copy = rtd::clone_bundle(bundle);
  ad::TrainingModeGuard eval(false);
  const auto labels = rtd::rtd_labels(batch, x_tilde);
  const auto weights = batch.original.non_pad_weights();
  auto mlm = [&] { return rtd::mlm_loss(rtd::generator_logits(copy, batch, nullptr), batch); };
  auto rtd = [&] {
    // Under GDES the probe follows E_G through the materialized sum, with no
    // stop-gradient, to see what sharing would have pushed into E_G.
    auto table = copy.mode == rtd::SharingMode::kGDES ? ad::add(copy.E_G, copy.E_delta) : copy.E_G;
    auto logits = rtd::discriminator_logits(copy, table, batch, x_tilde, nullptr);
    return ad::scale(rtd::rtd_loss(logits, labels, weights), static_cast<T>(lambda));
  };
  return gradient_interference<T>(copy.E_G, mlm, rtd);
}

std::vector<double> moving_average(std::span<const double> series, std::size_t window) {
  if (window == 0) throw std::invalid_argument("moving_average: window must be >= 1");
  std::vector<double> out(series.size());
  double running = 0.0;
  for (std::size_t t = 0; t < series.size(); ++t) {
    running += series[t];
    if (t >= window) running -= series[t - window];
    const std::size_t n = std::min(t + 1, window);
    // Recompute exactly at window boundaries so drift never accumulates.
    if (t % 1024 == 1023) {
      running = 0.0;
      for (std::size_t k = t + 1 - n; k <= t; ++k) running += series[k];
    }
    out[t] = running / static_cast<double>(n);
  }
  return out;
}

std::string render_svg(const std::vector<Curve>& curves, const std::string& title, const std::string& y_label) {
  constexpr double W = 720, H = 440, L = 70, R = 150, Tm = 40, B = 50;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& c : curves) {
    for (std::size_t i = 0; i < c.values.size(); ++i) {
      if (!std::isfinite(c.values[i])) continue;
      xmin = std::min(xmin, static_cast<double>(c.steps[i]));
      xmax = std::max(xmax, static_cast<double>(c.steps[i]));
      ymin = std::min(ymin, c.values[i]);
      ymax = std::max(ymax, c.values[i]);
    }
  }
  if (xmin > xmax) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - Tm - B); };

  std::ostringstream s;
  char buf[256];
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << title << "</text>\n";
  std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", L, H - B,
                W - R, H - B);
  s << buf;
  std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", L, Tm, L,
                H - B);
  s << buf;
  for (int k = 0; k <= 4; ++k) {
    const double xv = xmin + (xmax - xmin) * k / 4.0;
    const double yv = ymin + (ymax - ymin) * k / 4.0;
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\" font-size=\"11\">%.0f</text>\n",
                  px(xv), H - B + 16, xv);
    s << buf;
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\" font-size=\"11\">%.3g</text>\n",
                  L - 6, py(yv) + 4, yv);
    s << buf;
  }
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">step</text>\n";
  s << "<text x=\"16\" y=\"" << H / 2 << "\" font-size=\"12\" transform=\"rotate(-90 16 " << H / 2
    << ")\" text-anchor=\"middle\">" << y_label << "</text>\n";
  for (std::size_t c = 0; c < curves.size(); ++c) {
    const char* color = colors[c % std::size(colors)];
    s << "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" << color << "\" points=\"";
    for (std::size_t i = 0; i < curves[c].values.size(); ++i) {
      if (!std::isfinite(curves[c].values[i])) continue;
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(static_cast<double>(curves[c].steps[i])),
                    py(curves[c].values[i]));
      s << buf;
    }
    s << "\"/>\n";
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%g\" y=\"%g\" font-size=\"12\" fill=\"%s\">%s</text>\n", W - R + 12,
                  Tm + 18.0 * static_cast<double>(c + 1), color, curves[c].label.c_str());
    s << buf;
  }
  s << "</svg>\n";
  return s.str();
}

std::vector<Curve> curve_capture(const std::vector<Curve>& curves, std::size_t window,
                                 const std::filesystem::path& csv_path, const std::filesystem::path& svg_path,
                                 const std::string& title) {
  if (curves.empty()) throw std::invalid_argument("curve_capture: no curves");
  std::vector<Curve> smooth;
  std::size_t longest = 0;
  for (const auto& c : curves) {
    if (c.values.empty()) throw std::invalid_argument("curve_capture: curve '" + c.label + "' is empty");
    if (c.steps.size() != c.values.size()) throw std::invalid_argument("curve_capture: steps/values mismatch");
    smooth.push_back({c.label, c.steps, moving_average(c.values, window)});
    longest = std::max(longest, c.values.size());
  }

  std::ofstream csv(csv_path, std::ios::binary);
  if (!csv) throw std::ios_base::failure("cannot write " + csv_path.string());
  std::vector<std::string> header{"step"};
  for (const auto& c : smooth) header.push_back(c.label);
  write_csv_row(csv, header);
  const auto& ref = *std::max_element(smooth.begin(), smooth.end(),
                                      [](const Curve& a, const Curve& b) { return a.steps.size() < b.steps.size(); });
  for (std::size_t i = 0; i < longest; ++i) {
    std::vector<std::string> row{std::to_string(ref.steps[i])};
    for (const auto& c : smooth) row.push_back(i < c.values.size() ? format_number(c.values[i]) : "");
    write_csv_row(csv, row);
  }
  csv.flush();
  if (!csv) throw std::ios_base::failure("failed writing " + csv_path.string());

  std::ofstream svg(svg_path, std::ios::binary);
  if (!svg) throw std::ios_base::failure("cannot write " + svg_path.string());
  svg << render_svg(smooth, title, "smoothed loss");
  if (!svg) throw std::ios_base::failure("failed writing " + svg_path.string());
  return smooth;
}

#define RTDLAB_INSTANTIATE(T)                                                                                \
  template CosineReport cosine_report<T>(const rtd::ModelBundle<T>&, double, std::uint64_t);                 \
  template InterferenceProbe gradient_interference<T>(ad::Tensor<T>, const std::function<ad::Tensor<T>()>&, \
                                                      const std::function<ad::Tensor<T>()>&);               \
  template InterferenceProbe interference_probe<T>(const rtd::ModelBundle<T>&, const text::MaskedBatch&,    \
                                                   const text::TokenBatch&, double);
RTDLAB_INSTANTIATE(float)
RTDLAB_INSTANTIATE(double)
#undef RTDLAB_INSTANTIATE

}  // namespace rtdlab::diag
