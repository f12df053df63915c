#pragma once

// Template definitions for model.hpp.

#include <algorithm>

namespace moce {

namespace detail {

template <typename Scalar>
LayerNormParams<Scalar> make_norm(Index dim, const std::string& name) {
  return {Parameter<Scalar>(name + ".gamma", Matrix<Scalar>::Ones(1, dim)),
          Parameter<Scalar>(name + ".beta", Matrix<Scalar>::Zero(1, dim))};
}

template <typename Scalar, typename Rng>
FeedForwardParams<Scalar> make_ffn(Index dim, Index hidden, Rng& rng, const std::string& name) {
  return {Parameter<Scalar>(name + ".w1", xavier<Scalar>(dim, hidden, rng)),
          Parameter<Scalar>(name + ".b1", Matrix<Scalar>::Zero(1, hidden)),
          Parameter<Scalar>(name + ".w2", xavier<Scalar>(hidden, dim, rng)),
          Parameter<Scalar>(name + ".b2", Matrix<Scalar>::Zero(1, dim))};
}

template <typename To, typename From>
Parameter<To> cast_param(const Parameter<From>& p) {
  return Parameter<To>(p.name, p.value.template cast<To>());
}

template <typename To, typename From>
LayerNormParams<To> cast_norm(const LayerNormParams<From>& n) {
  return {cast_param<To>(n.gamma), cast_param<To>(n.beta)};
}

template <typename To, typename From>
FeedForwardParams<To> cast_ffn(const FeedForwardParams<From>& f) {
  return {cast_param<To>(f.w1), cast_param<To>(f.b1), cast_param<To>(f.w2), cast_param<To>(f.b2)};
}

template <typename P, typename Fn>
void visit_parameters(P& m, Fn&& fn) {
  fn(m.embedding);
  if (!m.config.share_embeddings) fn(m.output_projection);
  auto norm = [&](auto& n) {
    fn(n.gamma);
    fn(n.beta);
  };
  auto ffn = [&](auto& f) {
    fn(f.w1);
    fn(f.b1);
    fn(f.w2);
    fn(f.b2);
  };
  auto attn = [&](auto& a) {
    fn(a.query);
    fn(a.key);
    fn(a.value);
    fn(a.output);
  };
  for (auto& l : m.encoder) {
    norm(l.attn_norm);
    attn(l.attn);
    norm(l.ffn_norm);
    ffn(l.ffn);
  }
  for (auto& l : m.decoder) {
    norm(l.self_norm);
    attn(l.self_attn);
    norm(l.cross_norm);
    attn(l.cross_attn);
    norm(l.ffn_norm);
    ffn(l.ffn);
  }
  norm(m.encoder_norm);
  norm(m.decoder_norm);
  if (m.pool) {
    for (auto& e : m.pool->experts) {
      if (e.radius == 0) continue;
      fn(e.kernel);
      if (m.pool->options.bias) fn(e.bias);
    }
  }
  for (auto& r : m.routers) fn(r.weight);
}

template <typename Scalar>
Var<Scalar> feed_forward(Tape<Scalar>& tape, const Var<Scalar>& x, FeedForwardParams<Scalar>& f) {
  auto h = relu(add_row(matmul(x, tape.parameter(f.w1)), tape.parameter(f.b1)));
  return add_row(matmul(h, tape.parameter(f.w2)), tape.parameter(f.b2));
}

template <typename Scalar>
Var<Scalar> norm(Tape<Scalar>& tape, const Var<Scalar>& x, LayerNormParams<Scalar>& n) {
  return layer_norm(x, tape.parameter(n.gamma), tape.parameter(n.beta));
}

template <typename Scalar>
Var<Scalar> embed(Tape<Scalar>& tape, Model<Scalar>& model, std::span<const std::vector<int>> seqs,
                  std::vector<int>& flat, std::vector<Index>& lengths) {
  flat.clear();
  lengths.clear();
  Index longest = 0;
  for (const auto& s : seqs) {
    flat.insert(flat.end(), s.begin(), s.end());
    lengths.push_back(static_cast<Index>(s.size()));
    longest = std::max<Index>(longest, static_cast<Index>(s.size()));
  }
  const Index d = model.config.model_dim;
  const Matrix<Scalar> table = sinusoidal_positions<Scalar>(longest, d);
  Matrix<Scalar> pos(static_cast<Index>(flat.size()), d);
  Index at = 0;
  for (Index l : lengths) {
    pos.middleRows(at, l) = table.topRows(l);
    at += l;
  }
  auto e = gather_rows(tape.parameter(model.embedding), std::span<const int>(flat));
  return add(scale(e, static_cast<Scalar>(std::sqrt(static_cast<double>(d)))), tape.constant(std::move(pos)));
}

}  // namespace detail

template <typename Scalar>
std::vector<Parameter<Scalar>*> Model<Scalar>::parameters() {
  std::vector<Parameter<Scalar>*> out;
  detail::visit_parameters(*this, [&](Parameter<Scalar>& p) { out.push_back(&p); });
  return out;
}

template <typename Scalar>
std::vector<const Parameter<Scalar>*> Model<Scalar>::parameters() const {
  std::vector<const Parameter<Scalar>*> out;
  detail::visit_parameters(*this, [&](const Parameter<Scalar>& p) { out.push_back(&p); });
  return out;
}

template <typename Scalar>
std::int64_t Model<Scalar>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto* p : parameters()) n += p->value.size();
  return n;
}

template <typename Scalar>
template <typename To>
Model<To> Model<Scalar>::cast() const {
  Model<To> m;
  m.config = config;
  m.vocab = vocab;
  m.embedding = detail::cast_param<To>(embedding);
  m.output_projection = detail::cast_param<To>(output_projection);
  for (const auto& l : encoder)
    m.encoder.push_back({detail::cast_norm<To>(l.attn_norm), l.attn.template cast<To>(), detail::cast_norm<To>(l.ffn_norm),
                         detail::cast_ffn<To>(l.ffn)});
  for (const auto& l : decoder)
    m.decoder.push_back({detail::cast_norm<To>(l.self_norm), l.self_attn.template cast<To>(),
                         detail::cast_norm<To>(l.cross_norm), l.cross_attn.template cast<To>(),
                         detail::cast_norm<To>(l.ffn_norm), detail::cast_ffn<To>(l.ffn)});
  m.encoder_norm = detail::cast_norm<To>(encoder_norm);
  m.decoder_norm = detail::cast_norm<To>(decoder_norm);
  if (pool) m.pool = pool->template cast<To>();
  for (const auto& r : routers) m.routers.push_back(r.template cast<To>());
  return m;
}

template <typename Scalar>
Matrix<Scalar> sinusoidal_positions(Index length, Index dim) {
  Matrix<Scalar> pe(length, dim);
  for (Index pos = 0; pos < length; ++pos)
    for (Index i = 0; i < dim; i += 2) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(dim));
      pe(pos, i) = static_cast<Scalar>(std::sin(angle));
      if (i + 1 < dim) pe(pos, i + 1) = static_cast<Scalar>(std::cos(angle));
    }
  return pe;
}

template <typename Scalar>
Model<Scalar> build_model(const ModelConfig& config, const Vocab& vocab) {
  config.validate();
  if (vocab.languages().empty()) throw Error("build_model: vocabulary has no languages");
  std::mt19937_64 rng(config.seed);
  Model<Scalar> m;
  m.config = config;
  m.vocab = vocab;
  const Index d = config.model_dim;
  {
    const double a = std::sqrt(3.0 / static_cast<double>(d));
    std::uniform_real_distribution<double> u(-a, a);
    Matrix<Scalar> e(vocab.size(), d);
    for (Index i = 0; i < e.size(); ++i) e.data()[i] = static_cast<Scalar>(u(rng));
    m.embedding = Parameter<Scalar>("embed", std::move(e));
  }
  if (!config.share_embeddings) {
    m.output_projection = Parameter<Scalar>("output_projection", detail::xavier<Scalar>(vocab.size(), d, rng));
  }
  for (int l = 0; l < config.encoder_layers; ++l) {
    const std::string p = "enc" + std::to_string(l);
    m.encoder.push_back({detail::make_norm<Scalar>(d, p + ".attn_norm"),
                         make_attention_params<Scalar>(d, config.heads, rng, p + ".attn"),
                         detail::make_norm<Scalar>(d, p + ".ffn_norm"),
                         detail::make_ffn<Scalar>(d, config.ffn_dim, rng, p + ".ffn")});
  }
  for (int l = 0; l < config.decoder_layers; ++l) {
    const std::string p = "dec" + std::to_string(l);
    m.decoder.push_back({detail::make_norm<Scalar>(d, p + ".self_norm"),
                         make_attention_params<Scalar>(d, config.heads, rng, p + ".self_attn"),
                         detail::make_norm<Scalar>(d, p + ".cross_norm"),
                         make_attention_params<Scalar>(d, config.heads, rng, p + ".cross_attn"),
                         detail::make_norm<Scalar>(d, p + ".ffn_norm"),
                         detail::make_ffn<Scalar>(d, config.ffn_dim, rng, p + ".ffn")});
  }
  m.encoder_norm = detail::make_norm<Scalar>(d, "enc.norm");
  m.decoder_norm = detail::make_norm<Scalar>(d, "dec.norm");
  const ExpertOptions expert_options{config.expert_bias, config.expert_activation};
  if (config.has_adaptive_layer()) {
    m.pool = make_expert_pool<Scalar>(config.max_radius, config.head_dim(), expert_options, rng);
    const int n = config.per_stream_router ? kNumStreams : 1;
    for (int s = 0; s < n; ++s) {
      const std::string name = n == 1 ? "router" : std::string("router.") + stream_name(s);
      m.routers.push_back(make_router<Scalar>(config.head_dim(), config.max_radius + 1, config.top_k, config.use_lid, d,
                                              config.gate_mode, rng, name));
    }
  } else if (config.has_fixed_scale_layer() && config.max_radius > 0) {
    m.pool = make_expert_pool<Scalar>(config.max_radius, config.head_dim(), expert_options, rng);
  }
  return m;
}

template <typename Scalar>
EncodedBatch<Scalar> encode_batch(Tape<Scalar>& tape, Model<Scalar>& model, std::span<const std::vector<int>> sources,
                                  const ForwardOptions& options, std::vector<Var<Scalar>>* balance_terms) {
  if (sources.empty()) throw Error("encode_batch: empty batch");
  std::mt19937_64 rng(options.dropout_seed * 2 + 1);
  const double p = options.training ? model.config.dropout : 0.0;
  std::vector<int> flat;
  std::vector<Index> lengths;
  for (const auto& s : sources)
    if (s.empty() || !model.vocab.is_language_id(s.front()))
      throw Error("source sequence must start with a language token");
  auto x = dropout(detail::embed(tape, model, sources, flat, lengths), p, rng);
  const Segments segs = Segments::from_lengths(lengths);
  const auto layout = AttentionLayout::self(segs);

  for (int l = 0; l < model.config.encoder_layers; ++l) {
    auto& layer = model.encoder[static_cast<std::size_t>(l)];
    auto h = detail::norm(tape, x, layer.attn_norm);
    Var<Scalar> a;
    if (l == model.config.ada_layer && model.config.has_adaptive_layer()) {
      std::vector<int> lid_ids;
      Var<Scalar> lid;
      if (model.config.use_lid) {
        if (options.lid_override && options.lid_override->zero()) {
          lid = tape.constant(Matrix<Scalar>::Zero(h.rows(), model.config.model_dim));
        } else {
          for (std::size_t s = 0; s < sources.size(); ++s) {
            const int id = options.lid_override ? options.lid_override->token_id : sources[s].front();
            lid_ids.insert(lid_ids.end(), sources[s].size(), id);
          }
          lid = gather_rows(tape.parameter(model.embedding), std::span<const int>(lid_ids));
        }
      }
      a = ada_msha_forward(tape, h, layer.attn, *model.pool, std::span<RouterParams<Scalar>>(model.routers), lid, layout,
                           options.routing, balance_terms);
    } else if (l == model.config.ada_layer && model.config.has_fixed_scale_layer()) {
      a = msha_forward(tape, h, layer.attn, model.pool ? &*model.pool : nullptr, ScaleAssignment{model.config.fixed_radii},
                       layout);
    } else {
      a = mha_forward(tape, h, h, layer.attn, layout);
    }
    x = add(x, dropout(a, p, rng));
    h = detail::norm(tape, x, layer.ffn_norm);
    x = add(x, dropout(detail::feed_forward(tape, h, layer.ffn), p, rng));
  }
  return {detail::norm(tape, x, model.encoder_norm), segs};
}

template <typename Scalar>
Var<Scalar> decode_batch(Tape<Scalar>& tape, Model<Scalar>& model, const EncodedBatch<Scalar>& encoded,
                         std::span<const std::vector<int>> decoder_inputs, const ForwardOptions& options) {
  if (static_cast<Index>(decoder_inputs.size()) != encoded.segments.count())
    throw Error("decode_batch: one decoder input per encoded sentence required");
  std::mt19937_64 rng(options.dropout_seed * 2 + 2);
  const double p = options.training ? model.config.dropout : 0.0;
  std::vector<int> flat;
  std::vector<Index> lengths;
  auto y = dropout(detail::embed(tape, model, decoder_inputs, flat, lengths), p, rng);
  const Segments segs = Segments::from_lengths(lengths);
  const auto self_layout = AttentionLayout::self(segs, true);
  const AttentionLayout cross_layout{segs, encoded.segments, false, {}};
  for (auto& layer : model.decoder) {
    auto h = detail::norm(tape, y, layer.self_norm);
    y = add(y, dropout(mha_forward(tape, h, h, layer.self_attn, self_layout), p, rng));
    h = detail::norm(tape, y, layer.cross_norm);
    y = add(y, dropout(mha_forward(tape, h, encoded.memory, layer.cross_attn, cross_layout), p, rng));
    h = detail::norm(tape, y, layer.ffn_norm);
    y = add(y, dropout(detail::feed_forward(tape, h, layer.ffn), p, rng));
  }
  y = detail::norm(tape, y, model.decoder_norm);
  auto& out = model.config.share_embeddings ? model.embedding : model.output_projection;
  return matmul_nt(y, tape.parameter(out));
}

template <typename Scalar>
Var<Scalar> forward_loss(Tape<Scalar>& tape, Model<Scalar>& model, std::span<const TokenSeq> sources,
                         std::span<const TokenSeq> targets, double smoothing, const ForwardOptions& options) {
  if (sources.size() != targets.size()) throw Error("forward_loss: source and target batch sizes differ");
  std::vector<std::vector<int>> src, dec_in;
  std::vector<int> gold;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    src.push_back(strip_padding(sources[i]));
    auto t = strip_padding(targets[i]);
    if (t.size() < 2) throw Error("forward_loss: target needs a language token and at least one more token");
    dec_in.emplace_back(t.begin(), t.end() - 1);
    gold.insert(gold.end(), t.begin() + 1, t.end());
  }
  std::vector<Var<Scalar>> balance;
  const bool want_balance = model.config.balance_loss > 0 && model.config.has_adaptive_layer();
  auto enc = encode_batch(tape, model, std::span<const std::vector<int>>(src), options, want_balance ? &balance : nullptr);
  auto logits = decode_batch(tape, model, enc, std::span<const std::vector<int>>(dec_in), options);
  auto loss = cross_entropy_ls(logits, std::span<const int>(gold), static_cast<Scalar>(smoothing), kPadId);
  if (want_balance && !balance.empty()) {
    auto total = balance.front();
    for (std::size_t i = 1; i < balance.size(); ++i) total = add(total, balance[i]);
    loss = add(loss, scale(total, static_cast<Scalar>(model.config.balance_loss / static_cast<double>(balance.size()))));
  }
  return loss;
}

template <typename Scalar>
TokenAccuracy evaluate_batch(Model<Scalar>& model, std::span<const TokenSeq> sources, std::span<const TokenSeq> targets,
                             const ForwardOptions& options) {
  Tape<Scalar> tape(false);
  std::vector<std::vector<int>> src, dec_in;
  std::vector<int> gold;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    src.push_back(strip_padding(sources[i]));
    auto t = strip_padding(targets[i]);
    dec_in.emplace_back(t.begin(), t.end() - 1);
    gold.insert(gold.end(), t.begin() + 1, t.end());
  }
  ForwardOptions eval = options;
  eval.training = false;
  auto enc = encode_batch(tape, model, std::span<const std::vector<int>>(src), eval);
  auto logits = decode_batch(tape, model, enc, std::span<const std::vector<int>>(dec_in), eval);
  TokenAccuracy acc;
  const auto& z = logits.value();
  double loss = 0.0;
  for (Index i = 0; i < z.rows(); ++i) {
    Index arg = 0;
    const Scalar m = z.row(i).maxCoeff(&arg);
    const double lse = static_cast<double>(m) + std::log((z.row(i).array() - m).exp().sum());
    loss += lse - static_cast<double>(z(i, gold[static_cast<std::size_t>(i)]));
    acc.correct += arg == gold[static_cast<std::size_t>(i)] ? 1 : 0;
    ++acc.total;
  }
  acc.loss = acc.total ? loss / static_cast<double>(acc.total) : 0.0;
  return acc;
}

template <typename Scalar>
SentenceDecoder<Scalar>::SentenceDecoder(Model<Scalar>& model, const TokenSeq& source, const ForwardOptions& options)
    : model_(&model), options_(options) {
  options_.training = false;
  Tape<Scalar> tape(false);
  std::vector<std::vector<int>> src{strip_padding(source)};
  memory_ = encode_batch(tape, model, std::span<const std::vector<int>>(src), options_).memory.value();
}

template <typename Scalar>
std::vector<double> SentenceDecoder<Scalar>::next_log_probs(std::span<const int> prefix) {
  Tape<Scalar> tape(false);
  EncodedBatch<Scalar> enc{tape.constant(memory_), Segments::single(memory_.rows())};
  std::vector<std::vector<int>> in{std::vector<int>(prefix.begin(), prefix.end())};
  auto logits = decode_batch(tape, *model_, enc, std::span<const std::vector<int>>(in), options_);
  const auto last = logits.value().row(logits.rows() - 1);
  std::vector<double> out(static_cast<std::size_t>(last.size()));
  double m = -std::numeric_limits<double>::infinity();
  for (Index v = 0; v < last.size(); ++v)
    if (v != kPadId && !model_->vocab.is_language_id(static_cast<int>(v))) m = std::max(m, static_cast<double>(last(v)));
  double z = 0.0;
  for (Index v = 0; v < last.size(); ++v)
    if (v != kPadId && !model_->vocab.is_language_id(static_cast<int>(v))) z += std::exp(static_cast<double>(last(v)) - m);
  const double lse = m + std::log(z);
  for (Index v = 0; v < last.size(); ++v) {
    const bool allowed = v != kPadId && !model_->vocab.is_language_id(static_cast<int>(v));
    out[static_cast<std::size_t>(v)] = allowed ? static_cast<double>(last(v)) - lse : -std::numeric_limits<double>::infinity();
  }
  return out;
}

namespace detail {

template <typename Scalar>
TokenSeq decode_with(Model<Scalar>& model, const TokenSeq& source, const std::string& target_lang,
                     const DecodeOptions& options, bool greedy) {
  const int start = model.vocab.language_id(target_lang);
  ForwardOptions fwd;
  fwd.lid_override = options.lid_override;
  SentenceDecoder<Scalar> dec(model, source, fwd);
  const auto hyp = greedy ? greedy_search(dec.scorer(), start, options.max_len, kEosId, options.length_penalty)
                          : beam_search(dec.scorer(), start,
                                        BeamOptions{options.beam, options.length_penalty, options.max_len, kEosId});
  TokenSeq out;
  out.lang = target_lang;
  out.ids.push_back(start);
  out.ids.insert(out.ids.end(), hyp.tokens.begin(), hyp.tokens.end());
  return out;
}

}  // namespace detail

template <typename Scalar>
TokenSeq beam_search(Model<Scalar>& model, const TokenSeq& source, const std::string& target_lang,
                     const DecodeOptions& options) {
  if (options.beam < 1) throw Error("beam_search: beam must be >= 1");
  return detail::decode_with(model, source, target_lang, options, false);
}

template <typename Scalar>
TokenSeq greedy_decode(Model<Scalar>& model, const TokenSeq& source, const std::string& target_lang,
                       const DecodeOptions& options) {
  return detail::decode_with(model, source, target_lang, options, true);
}

}  // namespace moce
