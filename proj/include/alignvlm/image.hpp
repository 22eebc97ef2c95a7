#pragma once

#include <png.h>

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "alignvlm/errors.hpp"

namespace alignvlm {

/// 8-bit raster stored planar (channel, row, col), matching the raw file
/// layout. channels is 1 (gray) or 3 (RGB).
struct Image {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint32_t channels = 1;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::uint32_t w, std::uint32_t h, std::uint32_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c),
        pixels(static_cast<std::size_t>(w) * h * c, fill) {}

  std::uint8_t& at(std::uint32_t c, std::uint32_t y, std::uint32_t x) {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  std::uint8_t at(std::uint32_t c, std::uint32_t y, std::uint32_t x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }

  bool empty() const noexcept { return width == 0 || height == 0; }

  friend bool operator==(const Image&, const Image&) = default;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void check_channels(std::uint32_t c) {
  if (c != 1 && c != 3) {
    throw InputError("unsupported channel count " + std::to_string(c) + " (expected 1 or 3)");
  }
}

}  // namespace detail

// Raw format: width, height, channels as little-endian u32, then planar bytes.
inline std::vector<std::uint8_t> encode_raw(const Image& img) {
  std::vector<std::uint8_t> out;
  out.reserve(12 + img.pixels.size());
  detail::put_u32(out, img.width);
  detail::put_u32(out, img.height);
  detail::put_u32(out, img.channels);
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline Image decode_raw(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 12) throw InputError("raw image: truncated header");
  Image img;
  img.width = detail::get_u32(bytes.data());
  img.height = detail::get_u32(bytes.data() + 4);
  img.channels = detail::get_u32(bytes.data() + 8);
  detail::check_channels(img.channels);
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height * img.channels;
  if (bytes.size() != 12 + n) {
    throw InputError("raw image: payload is " + std::to_string(bytes.size() - 12) +
                     " bytes, header implies " + std::to_string(n));
  }
  img.pixels.assign(bytes.begin() + 12, bytes.end());
  return img;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& b) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline void save_raw(const Image& img, const std::filesystem::path& path) {
  write_bytes(path, encode_raw(img));
}

inline Image load_raw(const std::filesystem::path& path) { return decode_raw(read_bytes(path)); }

inline void save_png(const Image& img, const std::filesystem::path& path) {
  detail::check_channels(img.channels);
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng initialisation failed");
  }
  std::vector<std::uint8_t> row(static_cast<std::size_t>(img.width) * img.channels);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // Fixed header fields only, so identical images give identical files.
  png_write_info(png, info);
  for (std::uint32_t y = 0; y < img.height; ++y) {
    for (std::uint32_t x = 0; x < img.width; ++x)
      for (std::uint32_t c = 0; c < img.channels; ++c)
        row[x * img.channels + c] = img.at(c, y, x);
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Image load_png(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw IoError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng initialisation failed");
  }
  Image img;
  std::vector<std::uint8_t> row;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw InputError("not a readable PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  png_read_update_info(png, info);
  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = png_get_channels(png, info);
  detail::check_channels(img.channels);
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height * img.channels, 0);
  row.resize(png_get_rowbytes(png, info));
  for (std::uint32_t y = 0; y < img.height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (std::uint32_t x = 0; x < img.width; ++x)
      for (std::uint32_t c = 0; c < img.channels; ++c)
        img.at(c, y, x) = row[x * img.channels + c];
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

/// Dispatches on extension: ".png" or ".raw".
inline Image load_image(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".png") return load_png(path);
  if (ext == ".raw") return load_raw(path);
  throw InputError("unknown image extension '" + ext + "' (expected .png or .raw)");
}

}  // namespace alignvlm
