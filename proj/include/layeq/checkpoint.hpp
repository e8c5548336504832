#pragma once

#include <string>

#include <json.hpp>

#include "layeq/model.hpp"

namespace layeq {

inline constexpr int kCheckpointVersion = 1;

/// Checkpoint document:
///   {format_version, sigma: [per-layer activation name or "attention"],
///    latent_shapes: [[tokens, dim, heads], ...],
///    layers: [{kind, dims, ..., params: {...row-major arrays...}}]}
/// Doubles are written in shortest round-trip form, so a save/load cycle is
/// bit-exact.
nlohmann::json model_to_json(const Model& model);
/// Throws ParseError naming the offending field path.
Model model_from_json(const nlohmann::json& doc);

std::string serialize_model(const Model& model);
Model parse_model(const std::string& text);

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

/// FNV-1a of the canonical serialization, as 16 hex digits.
std::string model_hash(const Model& model);

}  // namespace layeq
