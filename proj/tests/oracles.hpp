#pragma once

// Reference computations written directly against Eigen, independent of the
// tape and the fused operators.

#include "moce/model.hpp"
#include "moce/routing_stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace oracle {

using moce::Index;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Mat softmax_rows(const Mat& x) {
  Mat y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    double z = 0;
    for (Index j = 0; j < x.cols(); ++j) z += std::exp(x(i, j));
    for (Index j = 0; j < x.cols(); ++j) y(i, j) = std::exp(x(i, j)) / z;
  }
  return y;
}

/// Zero-padded same-length 1-D convolution, kernel stored tap-major as (k*C) x C.
inline Mat conv_same(const Mat& x, const Mat& w, const Mat& b) {
  const Index c = x.cols(), k = w.rows() / c, half = (k - 1) / 2;
  Mat y = Mat::Zero(x.rows(), w.cols());
  for (Index t = 0; t < x.rows(); ++t) {
    for (Index o = 0; o < w.cols(); ++o) {
      double s = b.size() ? b(0, o) : 0.0;
      for (Index tap = 0; tap < k; ++tap) {
        const Index src = t + tap - half;
        if (src < 0 || src >= x.rows()) continue;
        for (Index i = 0; i < c; ++i) s += x(src, i) * w(tap * c + i, o);
      }
      y(t, o) = s;
    }
  }
  return y;
}

/// Textbook multi-head attention on one unpadded sequence.
inline Mat mha(const Mat& xq, const Mat& xkv, const Mat& wq, const Mat& wk, const Mat& wv, const Mat& wo, int heads,
               bool causal = false) {
  const Mat q = xq * wq, k = xkv * wk, v = xkv * wv;
  const Index dk = q.cols() / heads;
  Mat cat(q.rows(), q.cols());
  for (int h = 0; h < heads; ++h) {
    Mat s = q.middleCols(h * dk, dk) * k.middleCols(h * dk, dk).transpose() / std::sqrt(static_cast<double>(dk));
    if (causal)
      for (Index i = 0; i < s.rows(); ++i)
        for (Index j = i + 1; j < s.cols(); ++j) s(i, j) = -1e300;
    cat.middleCols(h * dk, dk) = softmax_rows(s) * v.middleCols(h * dk, dk);
  }
  return cat * wo;
}

inline Mat layer_norm(const Mat& x, const Mat& gamma, const Mat& beta, double eps = 1e-5) {
  Mat y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    for (Index j = 0; j < x.cols(); ++j) y(i, j) = (x(i, j) - mean) / std::sqrt(var + eps) * gamma(0, j) + beta(0, j);
  }
  return y;
}

/// Indices of the k largest values by exhaustive comparison; ties go to the
/// lower index.
inline std::vector<int> brute_topk(const std::vector<double>& v, int k) {
  std::vector<int> chosen;
  std::vector<bool> used(v.size(), false);
  for (int r = 0; r < k; ++r) {
    int best = -1;
    for (std::size_t i = 0; i < v.size(); ++i)
      if (!used[i] && (best < 0 || v[i] > v[static_cast<std::size_t>(best)])) best = static_cast<int>(i);
    used[static_cast<std::size_t>(best)] = true;
    chosen.push_back(best);
  }
  return chosen;
}

/// Per-expert selection counts of an adaptive first encoder layer, recounted
/// from the parameters: embedding, positions, layer norm, Q/K/V projections,
/// router scores and brute-force top-k for every token of every sentence.
template <typename Scalar>
std::vector<std::uint64_t> recount_first_layer(const moce::Model<Scalar>& m, const std::vector<std::vector<int>>& sentences) {
  const auto& c = m.config;
  const int experts = c.max_radius + 1;
  std::vector<std::uint64_t> counts(static_cast<std::size_t>(experts), 0);
  const Mat emb = m.embedding.value.template cast<double>();
  const auto& layer = m.encoder.front();
  const Index d = c.model_dim, dk = c.head_dim();
  const Mat wr = m.routers.front().weight.value.template cast<double>();
  for (const auto& ids : sentences) {
    const Index n = static_cast<Index>(ids.size());
    Mat x(n, d);
    for (Index t = 0; t < n; ++t)
      for (Index j = 0; j < d; ++j) {
        const double angle = static_cast<double>(t) / std::pow(10000.0, static_cast<double>(j - j % 2) / static_cast<double>(d));
        x(t, j) = emb(ids[static_cast<std::size_t>(t)], j) * std::sqrt(static_cast<double>(d)) + (j % 2 ? std::cos(angle) : std::sin(angle));
      }
    const Mat h = layer_norm(x, layer.attn_norm.gamma.value.template cast<double>(), layer.attn_norm.beta.value.template cast<double>());
    const Mat proj[3] = {h * layer.attn.query.value.template cast<double>(), h * layer.attn.key.value.template cast<double>(),
                         h * layer.attn.value.value.template cast<double>()};
    for (const auto& p : proj)
      for (int head = 0; head < c.heads; ++head)
        for (Index t = 0; t < n; ++t) {
          Mat in(1, wr.rows());
          in.leftCols(dk) = p.block(t, head * dk, 1, dk);
          if (c.use_lid) in.rightCols(d) = emb.row(ids.front());
          const Mat logits = in * wr;
          const Mat probs = softmax_rows(logits);
          const Mat& scores = c.gate_mode == moce::GateMode::Probabilities ? probs : logits;
          std::vector<double> s(scores.data(), scores.data() + experts);
          for (int e : brute_topk(s, c.top_k)) ++counts[static_cast<std::size_t>(e)];
        }
  }
  return counts;
}

}  // namespace oracle
