#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace layeq {

/// Writes `contents` to a sibling temp file and renames it over `path`.
/// Throws IoError on failure.
void write_file_atomic(const std::string& path, std::string_view contents);
std::string read_file(const std::string& path);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t value);

}  // namespace layeq
