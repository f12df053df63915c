#pragma once

#include "moce/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iterator>
#include <span>
#include <string>

namespace moce {

/// Derivatives use the fourth-order central stencil
/// (f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h, which allows a step large
/// enough that round-off in the loss stays far below the tolerance.
struct GradCheckOptions {
  double step = 1e-4;
  /// Denominator floor: |a - n| / max(|a|, |n|, floor). Below the floor the
  /// comparison degrades to an absolute error, which keeps near-zero
  /// coordinates from dominating through finite-difference round-off.
  double floor = 1e-6;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  Index worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  Index probes = 0;
  /// Coordinates skipped because a stencil point flipped a discrete decision
  /// (a top-k selection or a ReLU active set).
  Index unstable_probes = 0;
};

namespace detail {

inline double relative_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

}  // namespace detail

/// Compares backward() against central differences for every parameter
/// coordinate. `loss` must bind parameters through Tape::parameter and return
/// a 1x1 value.
inline GradCheckReport grad_check_parameters(const std::function<Var<double>(Tape<double>&)>& loss,
                                             std::span<Parameter<double>* const> params,
                                             const GradCheckOptions& opts = {}) {
  for (auto* p : params) p->zero_grad();
  std::size_t base_fingerprint = 0;
  {
    Tape<double> tape;
    tape.set_track_kinks(true);
    auto l = loss(tape);
    if (!std::isfinite(l.scalar())) throw Error("grad_check: loss is not finite");
    tape.backward(l);
    base_fingerprint = tape.decision_fingerprint();
  }
  auto evaluate = [&](std::size_t& fp) {
    Tape<double> tape(false);
    tape.set_track_kinks(true);
    auto l = loss(tape);
    fp = tape.decision_fingerprint();
    return l.scalar();
  };

  GradCheckReport report;
  for (auto* p : params) {
    for (Index i = 0; i < p->value.size(); ++i) {
      double& x = p->value.data()[i];
      const double orig = x;
      std::size_t fp[4] = {};
      double f[4];
      const double offsets[4] = {-2.0, -1.0, 1.0, 2.0};
      for (int j = 0; j < 4; ++j) {
        x = orig + offsets[j] * opts.step;
        f[j] = evaluate(fp[j]);
      }
      x = orig;
      ++report.probes;
      if (std::any_of(std::begin(fp), std::end(fp), [&](std::size_t v) { return v != base_fingerprint; })) {
        ++report.unstable_probes;
        continue;
      }
      const double numeric = (f[0] - 8.0 * f[1] + 8.0 * f[2] - f[3]) / (12.0 * opts.step);
      const double analytic = p->grad.data()[i];
      const double err = detail::relative_error(analytic, numeric, opts.floor);
      if (err > report.max_rel_error || report.worst_index < 0) {
        report.max_rel_error = std::max(report.max_rel_error, err);
        report.worst_parameter = p->name;
        report.worst_index = i;
        report.analytic_at_worst = analytic;
        report.numeric_at_worst = numeric;
      }
    }
  }
  return report;
}

/// Single-input form: f maps a leaf bound to `x` to a scalar.
inline double grad_check(const std::function<Var<double>(Tape<double>&, const Var<double>&)>& f,
                         const Matrix<double>& x, double step = 1e-4, double floor = 1e-6) {
  Parameter<double> p("x", x);
  auto wrapped = [&](Tape<double>& tape) { return f(tape, tape.parameter(p)); };
  Parameter<double>* ptr = &p;
  const auto report = grad_check_parameters(wrapped, std::span<Parameter<double>* const>(&ptr, 1), {step, floor});
  return report.max_rel_error;
}

}  // namespace moce
