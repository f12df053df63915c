#pragma once

#include "moce/model.hpp"

#include <string>
#include <vector>

namespace moce {

/// Layout: "MOCE1", u64 little-endian header length, UTF-8 JSON header
/// {config, languages, tensors: [{name, shape, offset}]}, then float32
/// little-endian tensor data in header order (offsets relative to the data).
void save_checkpoint(const Model<float>& model, const std::string& path);
Model<float> load_checkpoint(const std::string& path);

/// Element-wise mean of every parameter; configs and vocabularies must agree.
Model<float> average_checkpoints(const std::vector<std::string>& paths);
Model<float> average_models(const std::vector<Model<float>>& models);

}  // namespace moce
