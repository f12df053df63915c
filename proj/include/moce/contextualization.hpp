#pragma once

#include "moce/ops.hpp"
#include "moce/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace moce {

struct ExpertOptions {
  bool bias = true;
  bool activation = false;  // ReLU after the convolution
};

/// g(., delta): identity for delta = 0, otherwise a same-length convolution of
/// width 2*delta - 1 over a head slice.
template <typename Scalar>
struct ContextExpert {
  int radius = 0;
  Parameter<Scalar> kernel;  // ((2*radius-1) * d_k) x d_k; empty for radius 0
  Parameter<Scalar> bias;    // 1 x d_k; empty for radius 0 or when bias is off

  int kernel_size() const { return radius == 0 ? 0 : 2 * radius - 1; }
};

/// Experts for every radius 0..max_radius, shared by all heads and streams of
/// one adaptive attention layer.
template <typename Scalar>
struct ExpertPool {
  int max_radius = 0;
  Index head_dim = 0;
  ExpertOptions options;
  std::vector<ContextExpert<Scalar>> experts;

  int size() const { return max_radius + 1; }

  std::vector<Parameter<Scalar>*> parameters() {
    std::vector<Parameter<Scalar>*> out;
    for (auto& e : experts) {
      if (e.radius == 0) continue;
      out.push_back(&e.kernel);
      if (options.bias) out.push_back(&e.bias);
    }
    return out;
  }

  template <typename To>
  ExpertPool<To> cast() const {
    ExpertPool<To> out{max_radius, head_dim, options, {}};
    for (const auto& e : experts) {
      ContextExpert<To> c;
      c.radius = e.radius;
      c.kernel = Parameter<To>(e.kernel.name, e.kernel.value.template cast<To>());
      c.bias = Parameter<To>(e.bias.name, e.bias.value.template cast<To>());
      out.experts.push_back(std::move(c));
    }
    return out;
  }
};

/// Closed form sum_{d=1..max_radius} (2d-1) * d_k^2 = max_radius^2 * d_k^2,
/// plus d_k per convolutional expert when biased.
inline std::int64_t pool_param_count(int max_radius, std::int64_t head_dim, bool include_bias) {
  if (max_radius < 0 || head_dim < 1) throw Error("pool_param_count: need max_radius >= 0 and head_dim >= 1");
  const std::int64_t d = max_radius;
  return d * d * head_dim * head_dim + (include_bias ? d * head_dim : 0);
}

template <typename Scalar, typename Rng>
ExpertPool<Scalar> make_expert_pool(int max_radius, Index head_dim, const ExpertOptions& options, Rng& rng,
                                    const std::string& prefix = "pool") {
  if (max_radius < 0) throw Error("expert pool: max radius must be >= 0");
  if (head_dim < 1) throw Error("expert pool: head dimension must be >= 1");
  ExpertPool<Scalar> pool{max_radius, head_dim, options, {}};
  for (int r = 0; r <= max_radius; ++r) {
    ContextExpert<Scalar> e;
    e.radius = r;
    if (r > 0) {
      const Index k = 2 * r - 1;
      const double a = std::sqrt(6.0 / static_cast<double>(k * head_dim + head_dim));
      std::uniform_real_distribution<double> u(-a, a);
      Matrix<Scalar> w(k * head_dim, head_dim);
      for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(u(rng));
      e.kernel = Parameter<Scalar>(prefix + ".expert" + std::to_string(r) + ".kernel", std::move(w));
      if (options.bias)
        e.bias = Parameter<Scalar>(prefix + ".expert" + std::to_string(r) + ".bias", Matrix<Scalar>::Zero(1, head_dim));
    }
    pool.experts.push_back(std::move(e));
  }
  return pool;
}

/// Applies g(., radius) to a (packed) head slice. Radius 0 returns `x` itself.
template <typename Scalar>
Var<Scalar> apply_expert(Tape<Scalar>& tape, ExpertPool<Scalar>& pool, int radius, const Var<Scalar>& x,
                         const Segments& segments) {
  if (radius < 0 || radius > pool.max_radius)
    throw Error("apply_expert: radius " + std::to_string(radius) + " outside [0," + std::to_string(pool.max_radius) + "]");
  if (x.cols() != pool.head_dim) throw Error("apply_expert: input width does not match the pool head dimension");
  if (radius == 0) return x;
  auto& e = pool.experts[static_cast<std::size_t>(radius)];
  auto w = tape.parameter(e.kernel);
  auto b = pool.options.bias ? tape.parameter(e.bias) : tape.constant(Matrix<Scalar>::Zero(1, pool.head_dim));
  auto y = conv1d_same(x, w, b, segments);
  return pool.options.activation ? relu(y) : y;
}

template <typename Scalar>
Var<Scalar> apply_expert(Tape<Scalar>& tape, ExpertPool<Scalar>& pool, int radius, const Var<Scalar>& x) {
  return apply_expert(tape, pool, radius, x, Segments::single(x.rows()));
}

}  // namespace moce
