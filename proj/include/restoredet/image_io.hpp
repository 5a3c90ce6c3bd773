#pragma once

#include <filesystem>
#include <string>

#include "restoredet/image.hpp"

namespace restoredet {

/// Writes an 8-bit PNG; samples are quantized as round(v * 255).
void write_png(const std::filesystem::path& path, const ImageTensor& image);

ImageTensor read_png(const std::filesystem::path& path);

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

std::string sha256_hex(const std::string& bytes);

}  // namespace restoredet
