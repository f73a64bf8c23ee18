#pragma once

#include "rlpo/types.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace rlpo::io {

// 8-bit grayscale PNG; pixel values are clamped to [0,1] and rounded.
void write_png(const std::filesystem::path& path, const Image& img);
std::vector<std::uint8_t> encode_png(const Image& img);
Image read_png(const std::filesystem::path& path);

}  // namespace rlpo::io
