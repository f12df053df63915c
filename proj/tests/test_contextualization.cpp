#include "moce/contextualization.hpp"
#include "moce/gradcheck.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace moce;
using M = Matrix<double>;

TEST(Pool, ParamCountClosedFormMatchesSummation) {
  for (int delta = 0; delta <= 8; ++delta)
    for (std::int64_t dk : {1, 4, 16, 64}) {
      std::int64_t sum = 0, bias = 0;
      for (int r = 1; r <= delta; ++r) {
        sum += (2 * r - 1) * dk * dk;
        bias += dk;
      }
      EXPECT_EQ(pool_param_count(delta, dk, false), sum);
      EXPECT_EQ(pool_param_count(delta, dk, true), sum + bias);
    }
  EXPECT_EQ(pool_param_count(5, 64, false), 102400);
  EXPECT_EQ(pool_param_count(6, 64, false) - pool_param_count(5, 64, false), 45056);
  EXPECT_THROW(pool_param_count(-1, 4, false), Error);
}

TEST(Pool, ParamCountMatchesAllocatedTensors) {
  std::mt19937_64 rng(1);
  for (bool bias : {false, true}) {
    auto pool = make_expert_pool<double>(4, 8, ExpertOptions{bias, false}, rng);
    std::int64_t n = 0;
    for (auto* p : pool.parameters()) n += p->value.size();
    EXPECT_EQ(n, pool_param_count(4, 8, bias));
    EXPECT_EQ(pool.size(), 5);
    for (int r = 1; r <= 4; ++r) EXPECT_EQ(pool.experts[static_cast<std::size_t>(r)].kernel_size(), 2 * r - 1);
  }
}

TEST(Expert, RadiusZeroIsIdentity) {
  std::mt19937_64 rng(2);
  auto pool = make_expert_pool<double>(3, 4, {}, rng);
  Tape<double> t;
  auto x = t.leaf(M::Random(5, 4));
  EXPECT_EQ(apply_expert(t, pool, 0, x).id(), x.id());
}

TEST(Expert, RadiusOneIsPointwiseLinear) {
  std::mt19937_64 rng(3);
  auto pool = make_expert_pool<double>(2, 3, {}, rng);
  pool.experts[1].bias.value = M::Random(1, 3);
  Tape<double> t;
  const M x = M::Random(6, 3);
  const M want = (x * pool.experts[1].kernel.value).rowwise() + pool.experts[1].bias.value.row(0);
  EXPECT_TRUE(apply_expert(t, pool, 1, t.constant(x)).value().isApprox(want, 1e-12));
}

TEST(Expert, MatchesConvolutionOracle) {
  std::mt19937_64 rng(4);
  for (bool act : {false, true}) {
    auto pool = make_expert_pool<double>(4, 3, ExpertOptions{true, act}, rng);
    Tape<double> t;
    const M x = M::Random(9, 3);
    for (int r = 1; r <= 4; ++r) {
      const auto& e = pool.experts[static_cast<std::size_t>(r)];
      M want = oracle::conv_same(x, e.kernel.value, e.bias.value);
      if (act) want = want.cwiseMax(0.0);
      EXPECT_TRUE(apply_expert(t, pool, r, t.constant(x)).value().isApprox(want, 1e-12)) << r;
    }
  }
}

TEST(Expert, Errors) {
  std::mt19937_64 rng(5);
  auto pool = make_expert_pool<double>(2, 3, {}, rng);
  Tape<double> t;
  EXPECT_THROW(apply_expert(t, pool, 3, t.constant(M::Zero(4, 3))), Error);
  EXPECT_THROW(apply_expert(t, pool, -1, t.constant(M::Zero(4, 3))), Error);
  EXPECT_THROW(apply_expert(t, pool, 1, t.constant(M::Zero(4, 2))), Error);
}

TEST(Expert, GradientsThroughKernelAndInput) {
  std::mt19937_64 rng(6);
  auto pool = make_expert_pool<double>(3, 2, {}, rng);
  const M w = M::Random(5, 2);
  const double err = grad_check(
      [&](Tape<double>& t, const Var<double>& x) {
        return sum(hadamard(apply_expert(t, pool, 3, x), t.constant(w)));
      },
      M::Random(5, 2));
  EXPECT_LT(err, 1e-6);
}
