#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace firmbound {

/// 64-bit FNV-1a over a byte string.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

/// FNV-1a of a whole file; throws IoError when unreadable.
std::uint64_t fnv1a64_file(const std::filesystem::path& path);

/// Fixed-width lowercase hex rendering.
std::string hex64(std::uint64_t value);

}  // namespace firmbound
