#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "layeq/analyze.hpp"
#include "layeq/group.hpp"
#include "layeq/model.hpp"

namespace layeq::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitCheckFailed = 2;

/// Parses "CxHxW", e.g. "1x8x8". Throws ConfigError.
ImageShape parse_image_shape(const std::string& text);

/// Left-right mirroring on the model's input and, when the output has the
/// image size, on its output. Flat inputs default to a single-channel square
/// image; token inputs to a square grid of square single-channel patches.
GroupPresentation model_mirror_group(const Model& model, const std::optional<ImageShape>& image = std::nullopt);

/// Subcommands: train, audit, reduce, certify, analyze-filters,
/// analyze-attention, verify-fixture. `args` excludes the program name.
/// Returns 0 on success, 2 when an audit, certification or fixture check
/// fails, 1 on usage, input or I/O errors.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace layeq::cli
