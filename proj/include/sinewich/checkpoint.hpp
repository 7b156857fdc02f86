#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "sinewich/model.hpp"

namespace sinewich {

/// FNV-1a over a canonical text rendering of the layout-relevant config fields.
std::uint64_t config_hash(const ModelConfig& cfg);

/// Writes every trainable tensor and buffer; see docs/checkpoint-format.md.
void save_checkpoint(const Model& model, const std::filesystem::path& path);

/// Restores tensors into a model built from the same config. Throws
/// ContractViolation on a bad magic, version, config hash, name or shape.
void load_checkpoint(Model& model, const std::filesystem::path& path);

}  // namespace sinewich
