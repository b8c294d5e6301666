// Embedding-geometry statistics, gradient-interference probes and loss-curve
// capture.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rtdlab/rtd/bundle.hpp"
#include "rtdlab/rtd/checkpoint.hpp"
#include "rtdlab/text/masking.hpp"

namespace rtdlab::diag {

// Mean cosine similarity over all unordered pairs of rows drawn from
// table[first_row:rows). `sample_fraction` >= 1 uses every row; otherwise
// round(fraction * eligible) rows are drawn without replacement from a
// stream seeded by `seed`. Zero-norm rows are dropped after sampling.
// Returns nullopt when fewer than two usable rows remain.
std::optional<double> avg_cosine_similarity(std::span<const double> table, std::size_t rows, std::size_t width,
                                            double sample_fraction, std::uint64_t seed,
                                            std::size_t first_row = 0);

// Rows chosen for a given vocabulary size, fraction and seed. Every table in
// one report uses the same rows.
std::vector<std::size_t> sample_rows(std::size_t rows, std::size_t first_row, double sample_fraction,
                                     std::uint64_t seed);

struct CosineReport {
  rtd::SharingMode mode = rtd::SharingMode::kGDES;
  std::optional<double> sim_EG;
  std::optional<double> sim_ED;
  std::optional<double> sim_Edelta;
  double sample_fraction = 1.0;
  std::uint64_t seed = 0;

  bool sampling_free() const { return sample_fraction >= 1.0; }
  // key=value lines; absent statistics are written as "-".
  std::string to_text() const;
};

// Token-embedding statistics with special rows excluded. ES reports the
// shared table in both columns; NES reports E_G and E_D; GDES reports E_G,
// E_G + E_delta and E_delta.
template <typename T>
CosineReport cosine_report(const rtd::ModelBundle<T>& bundle, double sample_fraction, std::uint64_t seed);
CosineReport cosine_report(const rtd::Checkpoint& checkpoint, double sample_fraction, std::uint64_t seed);

struct InterferenceProbe {
  std::size_t step = 0;
  std::optional<double> cos_angle;  // absent when either gradient is zero
  double norm_mlm = 0.0;
  double norm_rtd = 0.0;
  std::vector<double> grad_mlm;  // dL_MLM / dE
  std::vector<double> grad_rtd;  // d(lambda L_RTD) / dE

  std::string to_text() const;
};

// Cosine between the gradients that two losses put on `table`, each from
// its own backward pass with the table's gradient cleared in between. The
// table's prior gradient is restored afterwards; other leaves reached by
// the losses keep what the passes accumulated.
template <typename T>
InterferenceProbe gradient_interference(ad::Tensor<T> table, const std::function<ad::Tensor<T>()>& loss_a,
                                        const std::function<ad::Tensor<T>()>& loss_b);

// Task gradients on the shared table of an ES bundle, or on E_G of a GDES
// bundle with the discriminator embedding E_G + E_delta taken without the
// stop-gradient. Works on a private copy of the bundle, in evaluation mode.
// Throws std::invalid_argument for NES, which has no shared table.
template <typename T>
InterferenceProbe interference_probe(const rtd::ModelBundle<T>& bundle, const text::MaskedBatch& batch,
                                     const text::TokenBatch& x_tilde, double lambda);

// Trailing moving average: out[t] = mean(x[max(0, t-w+1) .. t]).
std::vector<double> moving_average(std::span<const double> series, std::size_t window);

struct Curve {
  std::string label;
  std::vector<std::size_t> steps;
  std::vector<double> values;
};

// Smooths every curve, writes a CSV (step column plus one column per label)
// and an SVG line plot. Throws std::invalid_argument for empty input and
// std::ios_base::failure on write errors. Returns the smoothed curves.
std::vector<Curve> curve_capture(const std::vector<Curve>& curves, std::size_t window,
                                 const std::filesystem::path& csv_path, const std::filesystem::path& svg_path,
                                 const std::string& title = "generator MLM loss");

std::string render_svg(const std::vector<Curve>& curves, const std::string& title, const std::string& y_label);

}  // namespace rtdlab::diag
