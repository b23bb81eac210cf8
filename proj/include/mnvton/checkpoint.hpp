#pragma once

#include <filesystem>
#include <string>

#include "mnvton/model.hpp"

#include <json.hpp>

namespace mnvton {

// Binary layout:
//   8 bytes   "MNVTCKPT"
//   8 bytes   header length n, little-endian u64
//   n bytes   JSON header: format version, variant, config hash, model
//             config and the ordered parameter list {name, shape}
//   rest      parameter values as little-endian IEEE-754 f64, in list order
// Saving then loading reproduces every parameter bit for bit.

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& path, const Model& model, const std::string& config_hash);

struct LoadedCheckpoint {
  Model model;
  std::string config_hash;
};

// IoError on unreadable or truncated files, ConfigError when the header
// disagrees with the parameter layout of the model it describes.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mnvton
