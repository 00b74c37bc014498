#include "latent_lens/io/png.hpp"

#include "latent_lens/error.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace latent_lens::io {
namespace {

void append_bytes(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void no_flush(png_structp /*png*/) {}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

RgbImage to_rgb(std::span<const double> chw, const ImageShape& shape, int scale) {
  if (static_cast<Index>(chw.size()) != shape.size()) throw ShapeError("to_rgb: size mismatch");
  if (shape.channels != 1 && shape.channels != 3) throw ShapeError("to_rgb: need 1 or 3 channels");
  RgbImage img{shape.width * scale, shape.height * scale, {}};
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  const Index plane = shape.plane();
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const Index src = Index{y / scale} * shape.width + x / scale;
      auto* px = &img.pixels[(static_cast<std::size_t>(y) * img.width + x) * 3];
      for (int c = 0; c < 3; ++c) {
        const int ch = shape.channels == 3 ? c : 0;
        px[c] = to_byte(chw[static_cast<std::size_t>(ch * plane + src)]);
      }
    }
  }
  return img;
}

RgbImage hstack(const std::vector<RgbImage>& tiles, int gap) {
  RgbImage out;
  for (const auto& t : tiles) {
    out.width += t.width;
    out.height = std::max(out.height, t.height);
  }
  if (!tiles.empty()) out.width += gap * static_cast<int>(tiles.size() - 1);
  out.pixels.assign(static_cast<std::size_t>(out.width) * out.height * 3, 255);
  int x0 = 0;
  for (const auto& t : tiles) {
    for (int y = 0; y < t.height; ++y) {
      std::copy_n(&t.pixels[static_cast<std::size_t>(y) * t.width * 3], t.width * 3,
                  &out.pixels[(static_cast<std::size_t>(y) * out.width + x0) * 3]);
    }
    x0 += t.width + gap;
  }
  return out;
}

RgbImage vstack(const std::vector<RgbImage>& rows, int gap) {
  RgbImage out;
  for (const auto& r : rows) {
    out.width = std::max(out.width, r.width);
    out.height += r.height;
  }
  if (!rows.empty()) out.height += gap * static_cast<int>(rows.size() - 1);
  out.pixels.assign(static_cast<std::size_t>(out.width) * out.height * 3, 255);
  int y0 = 0;
  for (const auto& r : rows) {
    for (int y = 0; y < r.height; ++y) {
      std::copy_n(&r.pixels[static_cast<std::size_t>(y) * r.width * 3], r.width * 3,
                  &out.pixels[static_cast<std::size_t>(y0 + y) * out.width * 3]);
    }
    y0 += r.height + gap;
  }
  return out;
}

std::vector<std::uint8_t> encode_png(const RgbImage& image) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw Error("png: cannot create write struct");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("png: cannot create info struct");
  }
  std::vector<std::uint8_t> out;
  std::vector<png_bytep> rows(static_cast<std::size_t>(image.height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("png: encoding failed");
  }
  png_set_write_fn(png, &out, append_bytes, no_flush);
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width),
               static_cast<png_uint_32>(image.height), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  for (int y = 0; y < image.height; ++y) {
    rows[static_cast<std::size_t>(y)] =
        const_cast<png_bytep>(&image.pixels[static_cast<std::size_t>(y) * image.width * 3]);
  }
  png_set_rows(png, info, rows.data());
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  const auto bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace latent_lens::io
