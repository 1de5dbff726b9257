#pragma once

#include "sfl/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace sfl {

/// 8-bit interleaved raster as read from or written to disk.
struct Raster {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t channels = 0;  ///< 1 (gray) or 3 (RGB)
    std::vector<std::uint8_t> pixels;
};

/// Reads PNG (gray, gray+alpha, RGB, RGBA, palette) or binary/ASCII PGM.
/// Alpha is dropped; everything else is converted to 8-bit gray or RGB.
Raster read_raster(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const Raster& raster);

/// [C,H,W] tensor with values k/255.
Tensor raster_to_tensor(const Raster& raster);

/// Inverse of raster_to_tensor; values are clamped to [0,1] and rounded.
Raster tensor_to_raster(const Tensor& image);

/// Single-channel portable float map ("Pf", little-endian, bottom row first).
void write_pfm(const std::filesystem::path& path, const Tensor& plane);
Tensor read_pfm(const std::filesystem::path& path);

}  // namespace sfl
