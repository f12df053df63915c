#include "moce/model.hpp"

namespace moce {

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error("model config: " + m); };
  if (encoder_layers < 1 || decoder_layers < 1) fail("need at least one encoder and one decoder layer");
  if (model_dim < 1 || heads < 1 || ffn_dim < 1) fail("dimensions must be positive");
  if (model_dim % heads != 0)
    fail("model_dim " + std::to_string(model_dim) + " not divisible by heads " + std::to_string(heads));
  if (max_radius < 0) fail("max_radius must be >= 0");
  if (ada_layer < 0 || ada_layer >= encoder_layers)
    fail("ada_layer " + std::to_string(ada_layer) + " must be < encoder_layers " + std::to_string(encoder_layers));
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0,1)");
  if (balance_loss < 0.0) fail("balance_loss must be >= 0");
  if (has_adaptive_layer() && (top_k < 1 || top_k > max_radius + 1))
    fail("top_k " + std::to_string(top_k) + " outside [1," + std::to_string(max_radius + 1) + "]");
  if (!fixed_radii.empty()) {
    if (static_cast<int>(fixed_radii.size()) != heads) fail("fixed_radii needs one radius per head");
    for (int r : fixed_radii)
      if (r < 0 || r > max_radius) fail("fixed radius " + std::to_string(r) + " outside [0,max_radius]");
  }
}

std::int64_t adaptive_overhead(const ModelConfig& config) {
  config.validate();
  if (!config.has_adaptive_layer()) return 0;
  const std::int64_t dk = config.head_dim();
  const std::int64_t routers = config.per_stream_router ? kNumStreams : 1;
  const std::int64_t in = dk + (config.use_lid ? config.model_dim : 0);
  return pool_param_count(config.max_radius, dk, config.expert_bias) + routers * in * (config.max_radius + 1);
}

LidOverride override_lid(const Vocab& vocab, const std::string& code) {
  if (code == "none") return LidOverride{};
  if (!vocab.has_language(code)) throw Error("override_lid: unknown language code '" + code + "'");
  return LidOverride{vocab.language_id(code)};
}

std::vector<int> strip_padding(const TokenSeq& seq) {
  std::vector<int> ids = seq.ids;
  while (!ids.empty() && ids.back() == kPadId) ids.pop_back();
  if (ids.empty() || ids.front() < kFirstLanguageId) throw Error("sequence lacks a leading language token");
  for (int id : ids)
    if (id == kPadId) throw Error("PAD inside a sequence");
  return ids;
}

}  // namespace moce
