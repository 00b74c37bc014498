#pragma once

#include "latent_lens/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace latent_lens::io {

/// 8-bit RGB raster, row-major, 3 bytes per pixel.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
};

/// Converts a CHW image with values in [0,1] (1 or 3 channels) to RGB, nearest-neighbour
/// upscaled by `scale`.
RgbImage to_rgb(std::span<const double> chw, const ImageShape& shape, int scale = 1);

/// Places tiles left to right with `gap` pixels of separation.
RgbImage hstack(const std::vector<RgbImage>& tiles, int gap = 2);
/// Stacks rows top to bottom; rows may differ in width (padded right).
RgbImage vstack(const std::vector<RgbImage>& rows, int gap = 2);

std::vector<std::uint8_t> encode_png(const RgbImage& image);
void write_png(const std::filesystem::path& path, const RgbImage& image);

}  // namespace latent_lens::io
