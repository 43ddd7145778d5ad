#pragma once

#include <filesystem>

#include "rmvps/image.hpp"

namespace rmvps {

double linear_to_srgb(double v);
double srgb_to_linear(double v);

/// 8-bit PNG. Three-channel images are sRGB-encoded from linear values; one-channel images
/// (masks) are written as plain gray levels in [0, 1].
void write_png(const std::filesystem::path& path, const Image& image);
/// Inverse of write_png: RGB comes back linear, gray comes back in [0, 1].
Image read_png(const std::filesystem::path& path);

/// Little-endian PFM (scale -1), 1 or 3 channels, bottom row first as the format requires.
void write_pfm(const std::filesystem::path& path, const Image& image);
Image read_pfm(const std::filesystem::path& path);

}  // namespace rmvps
