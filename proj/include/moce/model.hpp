#pragma once

#include "moce/attention.hpp"
#include "moce/beam_search.hpp"
#include "moce/contextualization.hpp"
#include "moce/ops.hpp"
#include "moce/router.hpp"
#include "moce/routing_stats.hpp"
#include "moce/tensor.hpp"
#include "moce/tokenizer.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace moce {

struct ModelConfig {
  int encoder_layers = 2;
  int decoder_layers = 2;
  int model_dim = 64;
  int heads = 4;
  int ffn_dim = 256;
  int max_radius = 5;  // largest contextualization radius; 0 gives a plain Transformer
  int top_k = 2;
  bool use_lid = true;
  int ada_layer = 0;
  double dropout = 0.1;
  bool share_embeddings = true;
  std::uint64_t seed = 1;

  bool expert_bias = true;
  bool expert_activation = false;
  GateMode gate_mode = GateMode::Probabilities;
  bool per_stream_router = false;
  double balance_loss = 0.0;  // weight of the auxiliary load-balancing term
  /// Non-empty: the adaptive layer is replaced by fixed-scale MSHA with these
  /// per-head radii (no router).
  std::vector<int> fixed_radii;

  int head_dim() const { return model_dim / heads; }
  bool has_adaptive_layer() const { return max_radius > 0 && fixed_radii.empty(); }
  bool has_fixed_scale_layer() const { return !fixed_radii.empty(); }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename Scalar>
struct LayerNormParams {
  Parameter<Scalar> gamma;
  Parameter<Scalar> beta;
};

template <typename Scalar>
struct FeedForwardParams {
  Parameter<Scalar> w1, b1, w2, b2;
};

template <typename Scalar>
struct EncoderLayer {
  LayerNormParams<Scalar> attn_norm;
  AttentionParams<Scalar> attn;
  LayerNormParams<Scalar> ffn_norm;
  FeedForwardParams<Scalar> ffn;
};

template <typename Scalar>
struct DecoderLayer {
  LayerNormParams<Scalar> self_norm;
  AttentionParams<Scalar> self_attn;
  LayerNormParams<Scalar> cross_norm;
  AttentionParams<Scalar> cross_attn;
  LayerNormParams<Scalar> ffn_norm;
  FeedForwardParams<Scalar> ffn;
};

/// Pre-norm byte-level encoder-decoder. One encoder layer (config.ada_layer)
/// uses adaptive multiscale-headed attention when max_radius > 0.
template <typename Scalar>
struct Model {
  ModelConfig config;
  Vocab vocab;
  Parameter<Scalar> embedding;          // vocab x d_model, shared by encoder, decoder and output
  Parameter<Scalar> output_projection;  // only when share_embeddings is off
  std::vector<EncoderLayer<Scalar>> encoder;
  std::vector<DecoderLayer<Scalar>> decoder;
  LayerNormParams<Scalar> encoder_norm;
  LayerNormParams<Scalar> decoder_norm;
  std::optional<ExpertPool<Scalar>> pool;
  std::vector<RouterParams<Scalar>> routers;

  /// Every trainable tensor in a fixed order (checkpoint and optimizer order).
  std::vector<Parameter<Scalar>*> parameters();
  std::vector<const Parameter<Scalar>*> parameters() const;
  std::int64_t parameter_count() const;

  template <typename To>
  Model<To> cast() const;
};

/// Parameters the adaptive layer adds over a plain attention layer: the expert
/// pool plus the router(s).
std::int64_t adaptive_overhead(const ModelConfig& config);

template <typename Scalar>
Model<Scalar> build_model(const ModelConfig& config, const Vocab& vocab);

/// Router lid substitution: a language token id, or the zero vector.
struct LidOverride {
  int token_id = -1;  // -1 selects the zero vector
  bool zero() const { return token_id < 0; }
};

/// `code` is a language in the model vocabulary or "none" (zero lid vector).
LidOverride override_lid(const Vocab& vocab, const std::string& code);

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
  RoutingStats* routing = nullptr;
  std::optional<LidOverride> lid_override;
};

template <typename Scalar>
struct EncodedBatch {
  Var<Scalar> memory;
  Segments segments;
};

template <typename Scalar>
Matrix<Scalar> sinusoidal_positions(Index length, Index dim);

/// Encoder over unpadded source sequences (each starting with its language
/// token), packed row-wise.
template <typename Scalar>
EncodedBatch<Scalar> encode_batch(Tape<Scalar>& tape, Model<Scalar>& model, std::span<const std::vector<int>> sources,
                                  const ForwardOptions& options = {},
                                  std::vector<Var<Scalar>>* balance_terms = nullptr);

/// Decoder logits (sum of target lengths x vocab) for teacher-forced inputs.
template <typename Scalar>
Var<Scalar> decode_batch(Tape<Scalar>& tape, Model<Scalar>& model, const EncodedBatch<Scalar>& encoded,
                         std::span<const std::vector<int>> decoder_inputs, const ForwardOptions& options = {});

/// Label-smoothed teacher-forcing loss averaged over all non-PAD target
/// positions of the batch. Sequences may carry trailing PAD.
template <typename Scalar>
Var<Scalar> forward_loss(Tape<Scalar>& tape, Model<Scalar>& model, std::span<const TokenSeq> sources,
                         std::span<const TokenSeq> targets, double smoothing, const ForwardOptions& options = {});

/// Strips trailing PAD and validates the leading language token.
std::vector<int> strip_padding(const TokenSeq& seq);

struct TokenAccuracy {
  std::int64_t correct = 0;
  std::int64_t total = 0;
  double loss = 0.0;  // mean unsmoothed cross entropy
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Teacher-forced next-token arg-max accuracy and loss over a batch.
template <typename Scalar>
TokenAccuracy evaluate_batch(Model<Scalar>& model, std::span<const TokenSeq> sources, std::span<const TokenSeq> targets,
                             const ForwardOptions& options = {});

/// Incremental decoding state for one source sentence.
template <typename Scalar>
class SentenceDecoder {
 public:
  SentenceDecoder(Model<Scalar>& model, const TokenSeq& source, const ForwardOptions& options = {});
  /// Log-probabilities of the next token; PAD and language tokens are excluded.
  std::vector<double> next_log_probs(std::span<const int> prefix);
  StepScorer scorer() {
    return [this](std::span<const int> p) { return next_log_probs(p); };
  }

 private:
  Model<Scalar>* model_;
  Matrix<Scalar> memory_;
  ForwardOptions options_;
};

struct DecodeOptions {
  int beam = 4;
  double length_penalty = 1.5;
  int max_len = 256;
  std::optional<LidOverride> lid_override;
};

template <typename Scalar>
TokenSeq beam_search(Model<Scalar>& model, const TokenSeq& source, const std::string& target_lang,
                     const DecodeOptions& options = {});

template <typename Scalar>
TokenSeq greedy_decode(Model<Scalar>& model, const TokenSeq& source, const std::string& target_lang,
                       const DecodeOptions& options = {});

}  // namespace moce

#include "moce/model_impl.hpp"
