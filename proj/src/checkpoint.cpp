#include "moce/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace moce {

namespace {

using nlohmann::json;

constexpr char kMagic[5] = {'M', 'O', 'C', 'E', '1'};

json config_to_json(const ModelConfig& c) {
  return {{"encoder_layers", c.encoder_layers},
          {"decoder_layers", c.decoder_layers},
          {"model_dim", c.model_dim},
          {"heads", c.heads},
          {"ffn_dim", c.ffn_dim},
          {"max_radius", c.max_radius},
          {"top_k", c.top_k},
          {"use_lid", c.use_lid},
          {"ada_layer", c.ada_layer},
          {"dropout", c.dropout},
          {"share_embeddings", c.share_embeddings},
          {"seed", c.seed},
          {"expert_bias", c.expert_bias},
          {"expert_activation", c.expert_activation},
          {"gate_mode", c.gate_mode == GateMode::Probabilities ? "probabilities" : "logits"},
          {"per_stream_router", c.per_stream_router},
          {"balance_loss", c.balance_loss},
          {"fixed_radii", c.fixed_radii}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.encoder_layers = j.at("encoder_layers");
  c.decoder_layers = j.at("decoder_layers");
  c.model_dim = j.at("model_dim");
  c.heads = j.at("heads");
  c.ffn_dim = j.at("ffn_dim");
  c.max_radius = j.at("max_radius");
  c.top_k = j.at("top_k");
  c.use_lid = j.at("use_lid");
  c.ada_layer = j.at("ada_layer");
  c.dropout = j.at("dropout");
  c.share_embeddings = j.at("share_embeddings");
  c.seed = j.at("seed");
  c.expert_bias = j.at("expert_bias");
  c.expert_activation = j.at("expert_activation");
  c.gate_mode = j.at("gate_mode") == "logits" ? GateMode::Logits : GateMode::Probabilities;
  c.per_stream_router = j.at("per_stream_router");
  c.balance_loss = j.at("balance_loss");
  c.fixed_radii = j.at("fixed_radii").get<std::vector<int>>();
  return c;
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw Error("checkpoint: truncated header length");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

void put_f32(std::ostream& out, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

void save_checkpoint(const Model<float>& model, const std::string& path) {
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto* p : model.parameters()) {
    tensors.push_back({{"name", p->name}, {"shape", {p->value.rows(), p->value.cols()}}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(p->value.size()) * 4;
  }
  const json header = {{"config", config_to_json(model.config)}, {"languages", model.vocab.languages()}, {"tensors", tensors}};
  const std::string text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint '" + path + "'");
    out.write(kMagic, sizeof kMagic);
    put_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto* p : model.parameters())
      for (Index i = 0; i < p->value.size(); ++i) put_f32(out, p->value.data()[i]);
    if (!out) throw Error("checkpoint: write failed for '" + path + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("checkpoint: cannot move into '" + path + "'");
}

Model<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint '" + path + "'");
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw Error("'" + path + "' is not a MOCE1 checkpoint");
  const auto length = get_u64(in);
  if (length > (1u << 30)) throw Error("checkpoint: implausible header length");
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) throw Error("checkpoint: truncated header");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(std::string("checkpoint: bad header: ") + e.what());
  }

  Model<float> model;
  try {
    const auto config = config_from_json(header.at("config"));
    const auto codes = header.at("languages").get<std::vector<std::string>>();
    model = build_model<float>(config, build_vocab(std::span<const std::string>(codes)));
  } catch (const json::exception& e) {
    throw Error(std::string("checkpoint: bad config: ") + e.what());
  }

  std::map<std::string, Parameter<float>*> by_name;
  for (auto* p : model.parameters()) by_name[p->name] = p;
  const auto& tensors = header.at("tensors");
  if (tensors.size() != by_name.size())
    throw Error("checkpoint: " + std::to_string(tensors.size()) + " tensors, config expects " + std::to_string(by_name.size()));
  std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  for (const auto& t : tensors) {
    const std::string name = t.at("name");
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("checkpoint: unexpected tensor '" + name + "'");
    auto& value = it->second->value;
    const auto shape = t.at("shape").get<std::vector<Index>>();
    if (shape.size() != 2 || shape[0] != value.rows() || shape[1] != value.cols())
      throw Error("checkpoint: tensor '" + name + "' has the wrong shape for this config");
    const std::uint64_t offset = t.at("offset");
    const std::uint64_t bytes = static_cast<std::uint64_t>(value.size()) * 4;
    if (offset + bytes > data.size()) throw Error("checkpoint: tensor '" + name + "' runs past the end of the file");
    for (Index i = 0; i < value.size(); ++i) {
      std::uint32_t u = 0;
      for (int b = 3; b >= 0; --b) u = (u << 8) | static_cast<unsigned char>(data[offset + static_cast<std::uint64_t>(i) * 4 + static_cast<std::uint64_t>(b)]);
      value.data()[i] = std::bit_cast<float>(u);
    }
  }
  return model;
}

Model<float> average_models(const std::vector<Model<float>>& models) {
  if (models.empty()) throw Error("average_checkpoints: no checkpoints");
  Model<float> out = models.front();
  for (std::size_t m = 1; m < models.size(); ++m)
    if (!(models[m].config == out.config) || !(models[m].vocab == out.vocab))
      throw Error("average_checkpoints: checkpoint " + std::to_string(m + 1) + " has a different config or vocabulary");
  auto dst = out.parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    Matrix<double> acc = Matrix<double>::Zero(dst[i]->value.rows(), dst[i]->value.cols());
    for (const auto& m : models) acc += m.parameters()[i]->value.cast<double>();
    dst[i]->value = (acc / static_cast<double>(models.size())).cast<float>();
  }
  return out;
}

Model<float> average_checkpoints(const std::vector<std::string>& paths) {
  std::vector<Model<float>> models;
  for (const auto& p : paths) models.push_back(load_checkpoint(p));
  return average_models(models);
}

}  // namespace moce
