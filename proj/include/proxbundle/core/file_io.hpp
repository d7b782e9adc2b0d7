#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace proxbundle::io {

/// Whole-file reads. A missing or unreadable file is a FormatError naming the path.
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

/// Truncating writes; failures throw std::runtime_error.
void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace proxbundle::io
