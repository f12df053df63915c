#pragma once

#include "moce/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

namespace moce {

/// Adam moments for an ordered list of parameters.
template <typename Scalar>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  std::int64_t step = 0;
  std::vector<Matrix<Scalar>> first;
  std::vector<Matrix<Scalar>> second;
};

/// One bias-corrected Adam update using the gradients held by each parameter.
template <typename Scalar>
void adam_step(std::span<Parameter<Scalar>* const> params, AdamState<Scalar>& state, double lr) {
  if (state.first.empty()) {
    for (const auto* p : params) {
      state.first.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
      state.second.push_back(Matrix<Scalar>::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (state.first.size() != params.size()) throw Error("adam_step: parameter list does not match optimizer state");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = *params[i];
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols() ||
        state.first[i].rows() != p.value.rows() || state.first[i].cols() != p.value.cols())
      throw Error("adam_step: shape mismatch for parameter '" + p.name + "'");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const auto b1 = static_cast<Scalar>(state.beta1), b2 = static_cast<Scalar>(state.beta2);
  const auto step_size = static_cast<Scalar>(lr / c1);
  const auto inv_sqrt_c2 = static_cast<Scalar>(1.0 / std::sqrt(c2));
  const auto eps = static_cast<Scalar>(state.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = state.first[i];
    auto& v = state.second[i];
    m = b1 * m + (Scalar(1) - b1) * p.grad;
    v = b2 * v + (Scalar(1) - b2) * p.grad.cwiseAbs2();
    p.value.array() -= step_size * m.array() / (v.array().sqrt() * inv_sqrt_c2 + eps);
  }
}

/// Inverse square-root schedule with linear warmup; `warmup == 0` keeps the
/// rate constant.
inline double inverse_sqrt_lr(std::int64_t step, double base_lr, std::int64_t warmup) {
  if (warmup <= 0) return base_lr;
  const double s = static_cast<double>(std::max<std::int64_t>(step, 1));
  const double w = static_cast<double>(warmup);
  return base_lr * std::min(s / w, std::sqrt(w / s));
}

}  // namespace moce
