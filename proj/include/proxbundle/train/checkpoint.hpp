#pragma once

// Checkpoint directory: manifest.json plus one PXB1 file per named tensor.

#include "proxbundle/train/model.hpp"

#include "json.hpp"

#include <filesystem>

namespace proxbundle::train {

nlohmann::ordered_json model_config_json(const ModelConfig& cfg);

/// Strict: unknown keys and wrong types raise ConfigError naming the field under `path`.
ModelConfig parse_model_config(const nlohmann::json& j, const std::string& path = "model");

void save_checkpoint(const Model& model, const std::filesystem::path& dir);

/// FormatError on a missing or inconsistent manifest or tensor.
Model load_checkpoint(const std::filesystem::path& dir);

}  // namespace proxbundle::train
