// Straight-line reference computations that share no code with the library.

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace rtdlab::oracle {

inline double log_sum_exp(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += std::exp(v);
  return std::log(s);
}

// -log p(label | z) for a sigmoid classifier.
inline double bce(double z, double label) {
  const double p = 1.0 / (1.0 + std::exp(-z));
  return -(label * std::log(p) + (1.0 - label) * std::log(1.0 - p));
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

inline double mean_pairwise_cosine(const std::vector<std::vector<double>>& rows) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      total += cosine(rows[i], rows[j]);
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

// Binomial standard deviation of a count.
inline double binomial_sd(double n, double p) { return std::sqrt(n * p * (1.0 - p)); }

}  // namespace rtdlab::oracle
