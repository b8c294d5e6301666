#include "rtdlab/autodiff/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "rtdlab/autodiff/ops.hpp"

namespace rtdlab::ad {

namespace {

using Replay = detail::StopGradientReplay;

class ReplayScope {
 public:
  explicit ReplayScope(Replay::Mode mode) : replay_(detail::stop_gradient_replay()) {
    replay_.mode = mode;
    replay_.cursor = 0;
    if (mode == Replay::Mode::kRecord) replay_.frozen.clear();
  }
  ~ReplayScope() { replay_.mode = Replay::Mode::kOff; }
  ReplayScope(const ReplayScope&) = delete;
  ReplayScope& operator=(const ReplayScope&) = delete;

 private:
  Replay& replay_;
};

double evaluate(const GraphBuilder& builder, const std::vector<Tensor<double>>& leaves,
                Replay::Mode mode) {
  NoGradGuard no_grad;
  ReplayScope scope(mode);
  const double v = builder(leaves).item();
  if (!std::isfinite(v)) throw AutodiffError("grad_check: builder produced a non-finite value");
  return v;
}

}  // namespace

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / denom;
}

double fd_step(double x) { return 1e-4 * (1.0 + std::abs(x)); }

GradCheckReport grad_check(const GraphBuilder& builder, std::vector<Tensor<double>> leaves,
                           double tolerance) {
  auto& tape = Tape<double>::current();
  tape.clear();
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }

  {
    ReplayScope scope(Replay::Mode::kRecord);
    const auto out = builder(leaves);
    if (out.size() != 1) throw AutodiffError("grad_check: builder must return a scalar");
    if (!std::isfinite(out.item())) {
      tape.clear();
      throw AutodiffError("grad_check: builder produced a non-finite value");
    }
    if (out.requires_grad()) out.backward();
  }
  tape.clear();

  GradCheckReport report;
  report.tolerance = tolerance;
  for (auto& leaf : leaves) {
    LeafCheck check;
    check.analytic = leaf.grad_or_zero();
    auto values = leaf.data();
    check.numeric.resize(values.size());
    check.numeric_raw.resize(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double x0 = values[i];
      const double h = fd_step(x0);
      values[i] = x0 + h;
      const double up = evaluate(builder, leaves, Replay::Mode::kReplay);
      const double up_raw = evaluate(builder, leaves, Replay::Mode::kOff);
      values[i] = x0 - h;
      const double down = evaluate(builder, leaves, Replay::Mode::kReplay);
      const double down_raw = evaluate(builder, leaves, Replay::Mode::kOff);
      values[i] = x0;
      check.numeric[i] = (up - down) / (2.0 * h);
      check.numeric_raw[i] = (up_raw - down_raw) / (2.0 * h);
      check.max_rel_err = std::max(check.max_rel_err, relative_error(check.analytic[i], check.numeric[i]));
    }
    report.max_rel_err = std::max(report.max_rel_err, check.max_rel_err);
    report.leaves.push_back(std::move(check));
  }
  report.passed = report.max_rel_err < tolerance;
  return report;
}

}  // namespace rtdlab::ad
