// Finite-difference verification of tape gradients (64-bit only).

#pragma once

#include <functional>
#include <vector>

#include "rtdlab/autodiff/tensor.hpp"

namespace rtdlab::ad {

using GraphBuilder = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

struct LeafCheck {
  std::vector<double> analytic;
  // Central differences with every stop_gradient output held at its
  // unperturbed value; this is what the analytic gradient must match.
  std::vector<double> numeric;
  // Central differences of the raw composite function, for reference only.
  std::vector<double> numeric_raw;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<LeafCheck> leaves;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// |a - b| / max(|a|, |b|, 1e-3); the floor keeps near-zero gradients from
// turning roundoff into large relative errors.
double relative_error(double analytic, double numeric);

// Perturbation used for element x: 1e-4 * (1 + |x|).
double fd_step(double x);

// Runs `builder` once on the tape, back-propagates, then perturbs every
// element of every leaf. The builder must be a deterministic function of the
// leaves. Clears the calling thread's tape before and after. Throws
// AutodiffError when the builder yields a non-finite value.
GradCheckReport grad_check(const GraphBuilder& builder, std::vector<Tensor<double>> leaves,
                           double tolerance);

}  // namespace rtdlab::ad
