#pragma once

#include "moce/attention.hpp"
#include "moce/contextualization.hpp"
#include "moce/ops.hpp"
#include "moce/routing_stats.hpp"
#include "moce/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace moce {

/// What the top-k mask and the renormalizing softmax act on.
/// `Probabilities` follows G = softmax(TopK(P(x), k)) literally, i.e. a second
/// softmax over the selected probabilities. `Logits` masks the router logits
/// instead (the usual MoE formulation); both select the same experts.
enum class GateMode { Probabilities, Logits };

template <typename Scalar>
struct RouterParams {
  Parameter<Scalar> weight;  // (d_k [+ lid_dim]) x num_experts
  int top_k = 2;
  bool use_lid = false;
  Index lid_dim = 0;
  GateMode mode = GateMode::Probabilities;

  int experts() const { return static_cast<int>(weight.value.cols()); }
  Index input_dim() const { return weight.value.rows(); }

  template <typename To>
  RouterParams<To> cast() const {
    return {Parameter<To>(weight.name, weight.value.template cast<To>()), top_k, use_lid, lid_dim, mode};
  }
};

template <typename Scalar, typename Rng>
RouterParams<Scalar> make_router(Index head_dim, int experts, int top_k, bool use_lid, Index lid_dim, GateMode mode,
                                 Rng& rng, const std::string& name = "router") {
  if (experts < 1) throw Error("router: need at least one expert");
  if (top_k < 1 || top_k > experts)
    throw Error("router: top-k " + std::to_string(top_k) + " outside [1," + std::to_string(experts) + "]");
  const Index in = head_dim + (use_lid ? lid_dim : 0);
  return {Parameter<Scalar>(name, detail::xavier<Scalar>(in, experts, rng)), top_k, use_lid, use_lid ? lid_dim : 0,
          mode};
}

/// Indices of the k largest scores, best first; equal scores prefer the lower
/// index.
template <typename T>
std::vector<int> topk_indices(std::span<const T> scores, int k) {
  if (k < 1 || k > static_cast<int>(scores.size()))
    throw Error("top-k: k=" + std::to_string(k) + " outside [1," + std::to_string(scores.size()) + "]");
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)]; });
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

/// G = softmax(TopK(p, k)) on a single probability vector.
inline GateDecision topk_gate(std::span<const double> p, int k) {
  GateDecision d;
  d.experts = topk_indices(p, k);
  const double m = p[static_cast<std::size_t>(d.experts.front())];
  double z = 0.0;
  for (int e : d.experts) {
    d.weights.push_back(std::exp(p[static_cast<std::size_t>(e)] - m));
    z += d.weights.back();
  }
  for (auto& w : d.weights) w /= z;
  return d;
}

/// Keeps the top-k entries of every row and sets the rest to -inf. The
/// selection is a constant for backward: gradients reach selected entries only.
template <typename Scalar>
Var<Scalar> topk_mask(const Var<Scalar>& scores, int k) {
  const Index n = scores.rows(), e = scores.cols();
  Matrix<Scalar> out = Matrix<Scalar>::Constant(n, e, neg_inf<Scalar>());
  Matrix<Scalar> keep = Matrix<Scalar>::Zero(n, e);
  auto* t = scores.tape();
  for (Index i = 0; i < n; ++i) {
    const auto row = scores.value().row(i);
    const auto sel = topk_indices(std::span<const Scalar>(row.data(), static_cast<std::size_t>(e)), k);
    std::size_t fp = 0;
    for (int s : sel) {
      out(i, s) = row(s);
      keep(i, s) = Scalar(1);
      fp = fp * 31 + static_cast<std::size_t>(s);
    }
    t->note_decision(fp);
  }
  const auto is = scores.id();
  return t->push(
      std::move(out),
      [is, keep = std::move(keep), self = t->size()](Tape<Scalar>& tp) {
        tp.accumulate(is, tp.grad(self).cwiseProduct(keep));
      },
      scores);
}

/// [x | lid] W^R, the pre-softmax router scores.
template <typename Scalar>
Var<Scalar> router_logits(Tape<Scalar>& tape, const Var<Scalar>& x, const Var<Scalar>& lid, RouterParams<Scalar>& params) {
  Var<Scalar> in = x;
  if (params.use_lid) {
    if (!lid.valid()) throw Error("router: language-conditioned router needs a lid vector");
    if (lid.rows() != x.rows() || lid.cols() != params.lid_dim) throw Error("router: lid block has the wrong shape");
    in = concat_cols({x, lid});
  }
  if (in.cols() != params.input_dim())
    throw Error("router: input width " + std::to_string(in.cols()) + " does not match router width " +
                std::to_string(params.input_dim()));
  return matmul(in, tape.parameter(params.weight));
}

/// P(x) = softmax([x | lid] W^R) for every row of x. `lid` is either invalid
/// (router without language conditioning) or one lid row per row of x.
template <typename Scalar>
Var<Scalar> router_probs(Tape<Scalar>& tape, const Var<Scalar>& x, const Var<Scalar>& lid, RouterParams<Scalar>& params) {
  return softmax(router_logits(tape, x, lid, params), 1);
}

/// x_hat[j] = sum_i G[j,i] * outputs[i][j]. An invalid entry in `outputs`
/// marks an expert no row selected; its gate column must be all zero.
template <typename Scalar>
Var<Scalar> mix_experts(std::span<const Var<Scalar>> outputs, const Var<Scalar>& gates) {
  if (static_cast<Index>(outputs.size()) != gates.cols()) throw Error("mix_experts: one output per gate column required");
  const Index n = gates.rows();
  Index d = -1;
  bool any = gates.tape()->requires_grad(gates.id());
  for (const auto& o : outputs) {
    if (!o.valid()) continue;
    detail::same_tape(o, gates);
    if (o.rows() != n || (d >= 0 && o.cols() != d)) throw Error("mix_experts: expert outputs disagree in shape");
    d = o.cols();
    any = any || o.tape()->requires_grad(o.id());
  }
  if (d < 0) throw Error("mix_experts: no expert output");
  Matrix<Scalar> out = Matrix<Scalar>::Zero(n, d);
  std::vector<std::size_t> ids(outputs.size(), SIZE_MAX);
  for (std::size_t e = 0; e < outputs.size(); ++e) {
    const auto col = gates.value().col(static_cast<Index>(e));
    if (!outputs[e].valid()) {
      if (col.cwiseAbs().maxCoeff() != Scalar(0)) throw Error("mix_experts: selected expert has no output");
      continue;
    }
    ids[e] = outputs[e].id();
    out.noalias() += col.asDiagonal() * outputs[e].value();
  }
  const auto ig = gates.id();
  auto* t = gates.tape();
  return t->push_many(
      std::move(out),
      [ids = std::move(ids), ig, self = t->size()](Tape<Scalar>& tp) {
        const auto& g = tp.grad(self);
        const auto& gates = tp.value(ig);
        Matrix<Scalar> dgates;
        const bool need_gates = tp.requires_grad(ig);
        if (need_gates) dgates = Matrix<Scalar>::Zero(gates.rows(), gates.cols());
        for (std::size_t e = 0; e < ids.size(); ++e) {
          if (ids[e] == SIZE_MAX) continue;
          const auto col = gates.col(static_cast<Index>(e));
          if (tp.requires_grad(ids[e])) tp.accumulate(ids[e], col.asDiagonal() * g);
          if (need_gates) dgates.col(static_cast<Index>(e)) = tp.value(ids[e]).cwiseProduct(g).rowwise().sum();
        }
        if (need_gates) tp.accumulate(ig, dgates);
      },
      any);
}

/// Where routing decisions of one (stream, head) slice are reported.
struct RoutingSink {
  RoutingStats* stats = nullptr;
  int stream = 0;
  int head = 0;
};

/// Gate weights and probabilities produced for one slice.
template <typename Scalar>
struct GateOutput {
  Var<Scalar> probs;   // N x E
  Var<Scalar> scores;  // what top-k acted on: probs or logits, per GateMode
  Var<Scalar> gates;   // N x E, zero outside the selection
};

template <typename Scalar>
GateOutput<Scalar> route(Tape<Scalar>& tape, const Var<Scalar>& x, const Var<Scalar>& lid, RouterParams<Scalar>& params) {
  auto logits = router_logits(tape, x, lid, params);
  auto probs = softmax(logits, 1);
  const auto scores = params.mode == GateMode::Probabilities ? probs : logits;
  return {probs, scores, softmax(topk_mask(scores, params.top_k), 1)};
}

/// Adaptive contextualization of one head slice: every token mixes the outputs
/// of its top-k experts, where expert outputs come from applying each expert to
/// the whole sequence. Rows flagged invalid are zeroed before the experts and
/// are not reported to the sink.
template <typename Scalar>
Var<Scalar> ada_contextualize(Tape<Scalar>& tape, const Var<Scalar>& x, ExpertPool<Scalar>& pool,
                              RouterParams<Scalar>& router, const Var<Scalar>& lid, const Segments& segments,
                              std::span<const std::uint8_t> valid = {}, const RoutingSink& sink = {},
                              std::vector<Var<Scalar>>* balance_terms = nullptr) {
  if (router.experts() != pool.size())
    throw Error("ada_contextualize: router width " + std::to_string(router.experts()) + " != pool size " +
                std::to_string(pool.size()));
  const Var<Scalar> in = detail::zero_padding(x, std::vector<std::uint8_t>(valid.begin(), valid.end()));
  auto gate = route(tape, in, lid, router);

  const auto& g = gate.gates.value();
  std::vector<Var<Scalar>> outputs(static_cast<std::size_t>(pool.size()));
  for (int e = 0; e < pool.size(); ++e)
    if (g.col(e).cwiseAbs().maxCoeff() != Scalar(0)) outputs[static_cast<std::size_t>(e)] = apply_expert(tape, pool, e, in, segments);

  if (sink.stats != nullptr) {
    const auto& scores = gate.scores.value();
    for (Index j = 0; j < g.rows(); ++j) {
      if (!valid.empty() && !valid[static_cast<std::size_t>(j)]) continue;
      const auto row = scores.row(j);
      GateDecision d;
      d.experts = topk_indices(std::span<const Scalar>(row.data(), static_cast<std::size_t>(row.size())), router.top_k);
      for (int e : d.experts) d.weights.push_back(static_cast<double>(g(j, e)));
      sink.stats->record(sink.stream, sink.head, d);
    }
  }

  if (balance_terms != nullptr) {
    // Switch-style auxiliary term: E * sum_i f_i * mean_j P[j,i], f constant.
    const Index e = g.cols();
    Matrix<Scalar> frac(1, e);
    for (Index i = 0; i < e; ++i)
      frac(0, i) = static_cast<Scalar>((g.col(i).array() != Scalar(0)).count()) / static_cast<Scalar>(g.rows() * router.top_k);
    auto term = scale(sum(hadamard(mean_rows(gate.probs), tape.constant(frac))), static_cast<Scalar>(e));
    balance_terms->push_back(term);
  }
  return mix_experts(std::span<const Var<Scalar>>(outputs), gate.gates);
}

/// Adaptive multiscale-headed self-attention: each Q/K/V head slice is
/// contextualized by ada_contextualize with a shared pool, then standard
/// attention and W^O. `routers` holds one shared router, or one per stream.
template <typename Scalar>
Var<Scalar> ada_msha_forward(Tape<Scalar>& tape, const Var<Scalar>& x, AttentionParams<Scalar>& params,
                             ExpertPool<Scalar>& pool, std::span<RouterParams<Scalar>> routers, const Var<Scalar>& lid,
                             const AttentionLayout& layout, RoutingStats* stats = nullptr,
                             std::vector<Var<Scalar>>* balance_terms = nullptr) {
  if (routers.size() != 1 && routers.size() != kNumStreams) throw Error("ada_msha_forward: need 1 or 3 routers");
  if (pool.head_dim != params.head_dim()) throw Error("ada_msha_forward: pool head dimension mismatch");
  auto slices = project_split(tape, x, params);
  std::array<std::vector<Var<Scalar>>*, kNumStreams> streams{&slices.query, &slices.key, &slices.value};
  std::array<Var<Scalar>, kNumStreams> merged;
  for (int s = 0; s < kNumStreams; ++s) {
    auto& router = routers[routers.size() == 1 ? 0 : static_cast<std::size_t>(s)];
    auto& heads = *streams[static_cast<std::size_t>(s)];
    for (int h = 0; h < params.heads; ++h) {
      heads[static_cast<std::size_t>(h)] = ada_contextualize(tape, heads[static_cast<std::size_t>(h)], pool, router, lid,
                                                             layout.queries, layout.key_valid, RoutingSink{stats, s, h},
                                                             balance_terms);
    }
    merged[static_cast<std::size_t>(s)] = concat_cols(std::span<const Var<Scalar>>(heads));
  }
  return matmul(attend(merged[0], merged[1], merged[2], params.heads, layout), tape.parameter(params.output));
}

}  // namespace moce
