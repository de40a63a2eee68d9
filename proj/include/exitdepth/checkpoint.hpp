#pragma once

#include <filesystem>
#include <string>

#include "exitdepth/model.hpp"

namespace exitdepth {

/// JSON document: {"format": "exitdepth-checkpoint", "version": 1, "config": {...},
/// "parameters": [{"name", "shape", "values"}]}. Doubles are written in
/// shortest round-trip form, so loading restores every bit.
std::string checkpoint_json(const Model& model);
Model model_from_json(const std::string& text);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

std::string model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace exitdepth
