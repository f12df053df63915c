#include "moce/gradcheck.hpp"
#include "moce/ops.hpp"
#include "moce/optim.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace moce;
using M = Matrix<double>;

namespace {

M random(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  M m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// sum(f(x) .* w) for a fixed random w, so every output entry matters.
Var<double> weighted(Tape<double>& t, const Var<double>& y, const M& w) { return sum(hadamard(y, t.constant(w))); }

}  // namespace

TEST(Ops, MatmulValue) {
  Tape<double> t;
  M a(2, 3), b(3, 2);
  a << 1, 2, 3, 4, 5, 6;
  b << 7, 8, 9, 10, 11, 12;
  M want(2, 2);
  want << 58, 64, 139, 154;
  EXPECT_EQ(matmul(t.constant(a), t.constant(b)).value(), want);
  EXPECT_THROW(matmul(t.constant(a), t.constant(a)), Error);
}

TEST(Ops, SoftmaxRowsSumToOneAndRejectAllMasked) {
  Tape<double> t;
  std::mt19937_64 rng(1);
  const M x = random(4, 5, rng);
  const auto y = softmax(t.constant(x), 1).value();
  for (Index i = 0; i < 4; ++i) EXPECT_NEAR(y.row(i).sum(), 1.0, 1e-12);
  EXPECT_TRUE(y.isApprox(oracle::softmax_rows(x), 1e-12));
  const auto z = softmax(t.constant(x), 0).value();
  for (Index j = 0; j < 5; ++j) EXPECT_NEAR(z.col(j).sum(), 1.0, 1e-12);
  M dead = x;
  dead.row(1).setConstant(neg_inf<double>());
  EXPECT_THROW(softmax(t.constant(dead), 1), Error);
}

TEST(Ops, CrossEntropyThreeClassHandValue) {
  Tape<double> t;
  M logits(1, 3);
  logits << 1.0, 2.0, 3.0;
  const int target = 2;
  const double eps = 0.1;
  const double lse = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  double want = 0.0;
  for (int c = 0; c < 3; ++c) want -= ((c == target ? 1.0 - eps : 0.0) + eps / 3.0) * (logits(0, c) - lse);
  const auto got = cross_entropy_ls(t.constant(logits), std::vector<int>{target}, eps).scalar();
  EXPECT_NEAR(got, want, 1e-12);
  EXPECT_NEAR(got, 0.5076059644, 1e-9);
}

TEST(Ops, CrossEntropyIgnoresPadRows) {
  Tape<double> t;
  std::mt19937_64 rng(2);
  const M logits = random(3, 4, rng);
  const auto all = cross_entropy_ls(t.constant(M(logits.topRows(2))), std::vector<int>{1, 3}, 0.1).scalar();
  const auto padded = cross_entropy_ls(t.constant(logits), std::vector<int>{1, 3, 99}, 0.1, 99).scalar();
  EXPECT_NEAR(all, padded, 1e-12);
  EXPECT_THROW(cross_entropy_ls(t.constant(logits), std::vector<int>{1, 4, 0}, 0.1), Error);
}

TEST(Ops, ConvMatchesZeroPaddedOracle) {
  Tape<double> t;
  std::mt19937_64 rng(3);
  for (int k : {1, 3, 5, 9}) {
    const M x = random(7, 4, rng), w = random(k * 4, 4, rng), b = random(1, 4, rng);
    const auto y = conv1d_same(t.constant(x), t.constant(w), t.constant(b)).value();
    EXPECT_TRUE(y.isApprox(oracle::conv_same(x, w, b), 1e-12)) << "k=" << k;
  }
  EXPECT_THROW(conv1d_same(t.constant(random(3, 2, rng)), t.constant(random(4, 2, rng)), t.constant(random(1, 2, rng))), Error);
}

TEST(Ops, ConvNeverCrossesSegments) {
  Tape<double> t;
  std::mt19937_64 rng(4);
  const M a = random(3, 2, rng), b = random(5, 2, rng), w = random(5 * 2, 2, rng), bias = random(1, 2, rng);
  M packed(8, 2);
  packed << a, b;
  const std::vector<Index> lengths{3, 5};
  const auto y = conv1d_same(t.constant(packed), t.constant(w), t.constant(bias), Segments::from_lengths(lengths)).value();
  EXPECT_TRUE(M(y.topRows(3)).isApprox(oracle::conv_same(a, w, bias), 1e-12));
  EXPECT_TRUE(M(y.bottomRows(5)).isApprox(oracle::conv_same(b, w, bias), 1e-12));
}

TEST(Ops, LayerNormMatchesOracle) {
  Tape<double> t;
  std::mt19937_64 rng(5);
  const M x = random(4, 6, rng), g = random(1, 6, rng), b = random(1, 6, rng);
  EXPECT_TRUE(layer_norm(t.constant(x), t.constant(g), t.constant(b)).value().isApprox(oracle::layer_norm(x, g, b), 1e-12));
}

TEST(GradCheck, EveryOperator) {
  std::mt19937_64 rng(6);
  const M w43 = random(4, 3, rng), w44 = random(4, 4, rng), w33 = random(3, 3, rng);
  const M b = random(3, 4, rng), conv_x = random(4, 3, rng), conv_w = random(9, 3, rng), conv_b = random(1, 3, rng);
  const std::vector<Index> lengths{1, 3};
  const auto segs = Segments::from_lengths(lengths);
  const std::vector<int> ids{2, 0, 2, 1};
  const std::vector<std::uint8_t> keep{1, 0, 1, 1};

  struct Case {
    const char* name;
    std::function<Var<double>(Tape<double>&, const Var<double>&)> f;
    M x;
  };
  const std::vector<Case> cases{
      {"matmul", [&](Tape<double>& t, const Var<double>& x) { return weighted(t, matmul(x, t.constant(b)), w44); }, random(4, 3, rng)},
      {"matmul_nt", [&](Tape<double>& t, const Var<double>& x) { return weighted(t, matmul_nt(x, x), w44); }, random(4, 3, rng)},
      {"softmax1", [&](Tape<double>& t, const Var<double>& x) { return weighted(t, softmax(x, 1), w43); }, random(4, 3, rng)},
      {"softmax0", [&](Tape<double>& t, const Var<double>& x) { return weighted(t, softmax(x, 0), w43); }, random(4, 3, rng)},
      {"layer_norm",
       [&](Tape<double>& t, const Var<double>& x) {
         return weighted(t, layer_norm(x, t.constant(M::Ones(1, 3) * 1.5), t.constant(M::Constant(1, 3, 0.2))), w43);
       },
       random(4, 3, rng)},
      {"conv",
       [&](Tape<double>& t, const Var<double>& x) {
         return weighted(t, conv1d_same(x, t.constant(conv_w), t.constant(conv_b), segs), w43);
       },
       random(4, 3, rng)},
      {"conv_kernel",
       [&](Tape<double>& t, const Var<double>& w) {
         return weighted(t, conv1d_same(t.constant(conv_x), w, t.constant(conv_b), segs), w43);
       },
       random(9, 3, rng)},
      {"cross_entropy", [&](Tape<double>&, const Var<double>& x) { return cross_entropy_ls(x, std::vector<int>{0, 2, 1, -1}, 0.1); }, random(4, 3, rng)},
      {"gather", [&](Tape<double>& t, const Var<double>& x) { return weighted(t, gather_rows(x, std::span<const int>(ids)), w43); }, random(3, 3, rng)},
      {"concat_slice",
       [&](Tape<double>& t, const Var<double>& x) {
         return weighted(t, concat_cols({slice_cols(x, 2, 1), slice_cols(x, 0, 2)}), w43);
       },
       random(4, 3, rng)},
      {"rows", [&](Tape<double>& t, const Var<double>& x) { return weighted(t, slice_rows(x, 1, 3), w33); }, random(4, 3, rng)},
      {"mask", [&](Tape<double>& t, const Var<double>& x) { return weighted(t, mask_rows(x, std::span<const std::uint8_t>(keep)), w43); }, random(4, 3, rng)},
      {"mean_rows", [&](Tape<double>& t, const Var<double>& x) { return weighted(t, mean_rows(x), M(w43.topRows(1))); }, random(4, 3, rng)},
      {"relu", [&](Tape<double>& t, const Var<double>& x) { return weighted(t, relu(x), w43); }, random(4, 3, rng)},
      {"add_row_scale",
       [&](Tape<double>& t, const Var<double>& x) { return weighted(t, scale(add_row(x, slice_rows(x, 0, 1)), 0.7), w43); },
       random(4, 3, rng)},
      {"sub_hadamard", [&](Tape<double>& t, const Var<double>& x) { return sum(hadamard(sub(x, t.constant(w43)), x)); }, random(4, 3, rng)},
  };
  for (const auto& c : cases) EXPECT_LT(grad_check(c.f, c.x), 1e-6) << c.name;
}

TEST(Tape, BackwardTwiceThrows) {
  Tape<double> t;
  auto x = t.leaf(M::Ones(2, 2));
  auto l = sum(x);
  t.backward(l);
  EXPECT_THROW(t.backward(l), Error);
}

TEST(Tape, SharedParameterAccumulates) {
  Parameter<double> p("p", M::Constant(1, 2, 3.0));
  Tape<double> t;
  auto a = t.parameter(p);
  auto b = t.parameter(p);
  EXPECT_EQ(a.id(), b.id());
  t.backward(sum(add(hadamard(a, a), b)));
  EXPECT_TRUE(p.grad.isApprox(M::Constant(1, 2, 7.0)));
}

TEST(Tape, InferenceTapeRejectsBackward) {
  Parameter<double> p("p", M::Ones(1, 1));
  Tape<double> t(false);
  auto l = sum(t.parameter(p));
  EXPECT_THROW(t.backward(l), Error);
}

TEST(Adam, MatchesHandUpdate) {
  Parameter<double> p("p", M::Constant(1, 2, 1.0));
  p.grad << 0.5, -2.0;
  AdamState<double> s;
  std::vector<Parameter<double>*> ps{&p};
  adam_step(std::span<Parameter<double>* const>(ps), s, 0.1);
  for (int i = 0; i < 2; ++i) {
    const double g = i ? -2.0 : 0.5;
    const double m = 0.1 * g / (1 - 0.9), v = 0.02 * g * g / (1 - 0.98);
    EXPECT_NEAR(p.value(0, i), 1.0 - 0.1 * m / (std::sqrt(v) + 1e-8), 1e-12);
  }
}

TEST(Adam, ZeroLearningRateKeepsParameters) {
  std::mt19937_64 rng(8);
  Parameter<double> p("p", random(3, 3, rng));
  const M before = p.value;
  AdamState<double> s;
  std::vector<Parameter<double>*> ps{&p};
  for (int i = 0; i < 10; ++i) {
    p.grad = random(3, 3, rng);
    adam_step(std::span<Parameter<double>* const>(ps), s, 0.0);
  }
  EXPECT_EQ(p.value, before);
}

TEST(Adam, InverseSqrtSchedule) {
  EXPECT_DOUBLE_EQ(inverse_sqrt_lr(100, 1e-3, 0), 1e-3);
  EXPECT_DOUBLE_EQ(inverse_sqrt_lr(50, 1e-3, 100), 5e-4);
  EXPECT_DOUBLE_EQ(inverse_sqrt_lr(100, 1e-3, 100), 1e-3);
  EXPECT_DOUBLE_EQ(inverse_sqrt_lr(400, 1e-3, 100), 5e-4);
}
