#pragma once

#include "moce/contextualization.hpp"
#include "moce/ops.hpp"
#include "moce/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace moce {

/// Projection weights of one multi-head attention block (no biases).
template <typename Scalar>
struct AttentionParams {
  int heads = 1;
  Parameter<Scalar> query;
  Parameter<Scalar> key;
  Parameter<Scalar> value;
  Parameter<Scalar> output;

  Index model_dim() const { return query.value.rows(); }
  Index head_dim() const { return model_dim() / heads; }

  std::vector<Parameter<Scalar>*> parameters() { return {&query, &key, &value, &output}; }

  template <typename To>
  AttentionParams<To> cast() const {
    auto c = [](const Parameter<Scalar>& p) { return Parameter<To>(p.name, p.value.template cast<To>()); };
    return {heads, c(query), c(key), c(value), c(output)};
  }
};

/// Per-head radii for the fixed-scale path.
struct ScaleAssignment {
  std::vector<int> radii;
};

namespace detail {

template <typename Scalar, typename Rng>
Matrix<Scalar> xavier(Index rows, Index cols, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> u(-a, a);
  Matrix<Scalar> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(u(rng));
  return m;
}

inline void check_heads(Index model_dim, int heads) {
  if (heads < 1 || model_dim % heads != 0)
    throw Error("model dimension " + std::to_string(model_dim) + " is not divisible by " + std::to_string(heads) +
                " heads");
}

}  // namespace detail

template <typename Scalar, typename Rng>
AttentionParams<Scalar> make_attention_params(Index model_dim, int heads, Rng& rng, const std::string& prefix) {
  detail::check_heads(model_dim, heads);
  AttentionParams<Scalar> p;
  p.heads = heads;
  p.query = Parameter<Scalar>(prefix + ".q", detail::xavier<Scalar>(model_dim, model_dim, rng));
  p.key = Parameter<Scalar>(prefix + ".k", detail::xavier<Scalar>(model_dim, model_dim, rng));
  p.value = Parameter<Scalar>(prefix + ".v", detail::xavier<Scalar>(model_dim, model_dim, rng));
  p.output = Parameter<Scalar>(prefix + ".o", detail::xavier<Scalar>(model_dim, model_dim, rng));
  return p;
}

template <typename Scalar>
struct HeadSlices {
  std::vector<Var<Scalar>> query, key, value;
};

/// Q = X W^Q (likewise K, V), each split into `heads` contiguous d_k-wide column
/// blocks.
template <typename Scalar>
HeadSlices<Scalar> project_split(Tape<Scalar>& tape, const Var<Scalar>& x, AttentionParams<Scalar>& params) {
  detail::check_heads(params.model_dim(), params.heads);
  if (x.cols() != params.model_dim()) throw Error("project_split: input width does not match the model dimension");
  const Index dk = params.head_dim();
  auto split = [&](const Var<Scalar>& full) {
    std::vector<Var<Scalar>> out;
    for (int h = 0; h < params.heads; ++h) out.push_back(slice_cols(full, h * dk, dk));
    return out;
  };
  return {split(matmul(x, tape.parameter(params.query))), split(matmul(x, tape.parameter(params.key))),
          split(matmul(x, tape.parameter(params.value)))};
}

/// Additive mask (0 or -inf) for `queries` x `keys` scores.
template <typename Scalar>
Matrix<Scalar> make_attention_mask(Index queries, Index keys, std::span<const std::uint8_t> key_valid, bool causal) {
  Matrix<Scalar> m = Matrix<Scalar>::Zero(queries, keys);
  for (Index i = 0; i < queries; ++i)
    for (Index j = 0; j < keys; ++j) {
      const bool masked_pad = !key_valid.empty() && !key_valid[static_cast<std::size_t>(j)];
      if (masked_pad || (causal && j > i)) m(i, j) = neg_inf<Scalar>();
    }
  return m;
}

/// softmax(Q K^T / sqrt(d_k) + mask) V for one head, composed from primitive
/// ops. `mask` may be empty (0 x 0) for no masking.
template <typename Scalar>
Var<Scalar> scaled_dot_attention(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v,
                                 const Matrix<Scalar>& mask = {}) {
  if (q.cols() != k.cols() || k.rows() != v.rows()) throw Error("scaled_dot_attention: incompatible shapes");
  auto scores = scale(matmul_nt(q, k), Scalar(1) / std::sqrt(static_cast<Scalar>(q.cols())));
  if (mask.size() != 0) {
    if (mask.rows() != q.rows() || mask.cols() != k.rows()) throw Error("scaled_dot_attention: mask shape mismatch");
    scores = add(scores, q.tape()->constant(mask));
  }
  return matmul(softmax(scores, 1), v);
}

/// Which rows may attend to which: ragged query/key segments (pairwise
/// aligned), optional causal masking within a segment, and optional per-key
/// validity flags (0 marks padding).
struct AttentionLayout {
  Segments queries;
  Segments keys;
  bool causal = false;
  std::vector<std::uint8_t> key_valid;

  static AttentionLayout self(const Segments& s, bool causal = false, std::vector<std::uint8_t> key_valid = {}) {
    return {s, s, causal, std::move(key_valid)};
  }
};

/// Fused multi-head scaled dot-product attention over a packed batch. Inputs
/// are full-width (heads side by side); output is Cat(head_1..head_h).
template <typename Scalar>
Var<Scalar> attend(const Var<Scalar>& q, const Var<Scalar>& k, const Var<Scalar>& v, int heads,
                   const AttentionLayout& layout) {
  detail::same_tape(q, k);
  detail::same_tape(q, v);
  if (q.cols() != k.cols() || k.cols() != v.cols() || k.rows() != v.rows()) throw Error("attend: incompatible shapes");
  detail::check_heads(q.cols(), heads);
  if (layout.queries.total() != q.rows() || layout.keys.total() != k.rows() ||
      layout.queries.count() != layout.keys.count())
    throw Error("attend: layout does not match the inputs");
  if (!layout.key_valid.empty() && static_cast<Index>(layout.key_valid.size()) != k.rows())
    throw Error("attend: one validity flag per key row required");
  const Index dk = q.cols() / heads;
  const Scalar inv = Scalar(1) / std::sqrt(static_cast<Scalar>(dk));
  const Index nseg = layout.queries.count();

  Matrix<Scalar> out(q.rows(), v.cols());
  std::vector<Matrix<Scalar>> probs(static_cast<std::size_t>(nseg * heads));
  for (Index s = 0; s < nseg; ++s) {
    const Index q0 = layout.queries.begin(s), lq = layout.queries.length(s);
    const Index k0 = layout.keys.begin(s), lk = layout.keys.length(s);
    if (layout.causal && lq != lk) throw Error("attend: causal masking needs equal query and key lengths");
    std::span<const std::uint8_t> valid;
    if (!layout.key_valid.empty()) valid = std::span(layout.key_valid).subspan(static_cast<std::size_t>(k0), static_cast<std::size_t>(lk));
    const Matrix<Scalar> mask = make_attention_mask<Scalar>(lq, lk, valid, layout.causal);
    for (int h = 0; h < heads; ++h) {
      const auto qs = q.value().block(q0, h * dk, lq, dk);
      const auto ks = k.value().block(k0, h * dk, lk, dk);
      const auto vs = v.value().block(k0, h * dk, lk, dk);
      Matrix<Scalar> scores = (qs * ks.transpose()) * inv + mask;
      Matrix<Scalar> p = detail::softmax_rows<Scalar>(scores);
      out.block(q0, h * dk, lq, dk) = p * vs;
      probs[static_cast<std::size_t>(s * heads + h)] = std::move(p);
    }
  }

  const auto iq = q.id(), ik = k.id(), iv = v.id();
  auto* t = q.tape();
  return t->push(
      std::move(out),
      [iq, ik, iv, heads, dk, inv, nseg, qs_seg = layout.queries, ks_seg = layout.keys, probs = std::move(probs),
       self = t->size()](Tape<Scalar>& tp) {
        const auto& g = tp.grad(self);
        const bool need_q = tp.requires_grad(iq), need_k = tp.requires_grad(ik), need_v = tp.requires_grad(iv);
        for (Index s = 0; s < nseg; ++s) {
          const Index q0 = qs_seg.begin(s), lq = qs_seg.length(s);
          const Index k0 = ks_seg.begin(s), lk = ks_seg.length(s);
          for (int h = 0; h < heads; ++h) {
            const auto& p = probs[static_cast<std::size_t>(s * heads + h)];
            const auto go = g.block(q0, h * dk, lq, dk);
            if (need_v) tp.grad_buffer(iv).block(k0, h * dk, lk, dk) += p.transpose() * go;
            if (!need_q && !need_k) continue;
            const Matrix<Scalar> dp = go * tp.value(iv).block(k0, h * dk, lk, dk).transpose();
            const Matrix<Scalar> ds = detail::softmax_rows_backward<Scalar>(p, dp) * inv;
            if (need_q) tp.grad_buffer(iq).block(q0, h * dk, lq, dk) += ds * tp.value(ik).block(k0, h * dk, lk, dk);
            if (need_k) tp.grad_buffer(ik).block(k0, h * dk, lk, dk) += ds.transpose() * tp.value(iq).block(q0, h * dk, lq, dk);
          }
        }
      },
      q, k, v);
}

namespace detail {

template <typename Scalar>
Var<Scalar> zero_padding(const Var<Scalar>& x, const std::vector<std::uint8_t>& valid) {
  if (valid.empty()) return x;
  for (auto f : valid)
    if (!f) return mask_rows(x, std::span<const std::uint8_t>(valid));
  return x;
}

}  // namespace detail

/// Fixed-scale multiscale-headed self-attention: head i sees g(., radii[i])
/// applied to its Q, K and V slices, then standard attention and W^O. Padded
/// rows (key_valid == 0) are zeroed before any convolution.
template <typename Scalar>
Var<Scalar> msha_forward(Tape<Scalar>& tape, const Var<Scalar>& x, AttentionParams<Scalar>& params,
                         ExpertPool<Scalar>* pool, const ScaleAssignment& assignment, const AttentionLayout& layout) {
  if (static_cast<int>(assignment.radii.size()) != params.heads)
    throw Error("msha_forward: need one radius per head (" + std::to_string(params.heads) + ")");
  auto slices = project_split(tape, x, params);
  auto contextualize = [&](std::vector<Var<Scalar>>& streams) {
    for (int h = 0; h < params.heads; ++h) {
      const int r = assignment.radii[static_cast<std::size_t>(h)];
      if (r == 0) continue;
      if (pool == nullptr) throw Error("msha_forward: radius " + std::to_string(r) + " needs an expert pool");
      auto in = detail::zero_padding(streams[static_cast<std::size_t>(h)], layout.key_valid);
      streams[static_cast<std::size_t>(h)] = apply_expert(tape, *pool, r, in, layout.queries);
    }
    return concat_cols(std::span<const Var<Scalar>>(streams));
  };
  auto q = contextualize(slices.query);
  auto k = contextualize(slices.key);
  auto v = contextualize(slices.value);
  return matmul(attend(q, k, v, params.heads, layout), tape.parameter(params.output));
}

/// Plain multi-head attention with separate query and memory inputs (used for
/// self-attention with `memory == x` and for encoder-decoder attention).
template <typename Scalar>
Var<Scalar> mha_forward(Tape<Scalar>& tape, const Var<Scalar>& x, const Var<Scalar>& memory,
                        AttentionParams<Scalar>& params, const AttentionLayout& layout) {
  auto q = matmul(x, tape.parameter(params.query));
  auto k = matmul(memory, tape.parameter(params.key));
  auto v = matmul(memory, tape.parameter(params.value));
  return matmul(attend(q, k, v, params.heads, layout), tape.parameter(params.output));
}

}  // namespace moce
