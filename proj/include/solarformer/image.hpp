// Image and mask patch types plus 8-bit PNG I/O (libpng).
#pragma once

#include "solarformer/tensor.hpp"

#include <png.h>

#include <cstdint>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace sf {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// RGB patch, values in [0,1], interleaved row-major (y, x, channel).
struct ImagePatch {
  int width = 0;
  int height = 0;
  std::vector<float> data;  // width*height*3

  float& at(int y, int x, int c) { return data[static_cast<std::size_t>((y * width + x) * 3 + c)]; }
  float at(int y, int x, int c) const {
    return data[static_cast<std::size_t>((y * width + x) * 3 + c)];
  }

  // [3,H,W] tensor for the model.
  template <typename T>
  Tensor<T> to_chw() const {
    Tensor<T> t({3, height, width});
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        for (int c = 0; c < 3; ++c) t.at3(c, y, x) = static_cast<T>(at(y, x, c));
    return t;
  }
};

// Binary mask, 0 = background, 1 = PV.
struct MaskPatch {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;  // width*height

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y * width + x)]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y * width + x)]; }

  bool has_pv() const {
    for (auto v : data)
      if (v) return true;
    return false;
  }
  std::int64_t pv_count() const {
    std::int64_t n = 0;
    for (auto v : data) n += v;
    return n;
  }
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

// Raw 8-bit PNG payload; channels is 1 (gray) or 3 (rgb) after canonical
// expansion of palette images.
struct Png8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;  // interleaved
};

inline Png8 read_png8(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng read init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng info init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("failed to decode PNG " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_set_strip_16(png);
  png_set_packing(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);

  Png8 out;
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.channels = static_cast<int>(png_get_channels(png, info));
  out.data.resize(static_cast<std::size_t>(out.width) * out.height * out.channels);

  std::vector<png_bytep> rows(static_cast<std::size_t>(out.height));
  const std::size_t stride = static_cast<std::size_t>(out.width) * out.channels;
  for (int y = 0; y < out.height; ++y) rows[static_cast<std::size_t>(y)] = out.data.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

inline void write_png8(const std::string& path, int width, int height, int channels,
                       const std::uint8_t* data) {
  if (channels != 1 && channels != 3) throw FormatError("write_png8 supports 1 or 3 channels");
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot write " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("libpng write init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng info init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed to encode PNG " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  const std::size_t stride = static_cast<std::size_t>(width) * channels;
  for (int y = 0; y < height; ++y)
    rows[static_cast<std::size_t>(y)] = const_cast<png_bytep>(data + y * stride);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline void write_image_png(const std::string& path, const ImagePatch& img) {
  std::vector<std::uint8_t> bytes(img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    float v = img.data[i];
    v = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
    bytes[i] = static_cast<std::uint8_t>(v * 255.0f + 0.5f);
  }
  write_png8(path, img.width, img.height, 3, bytes.data());
}

inline void write_mask_png(const std::string& path, const MaskPatch& mask) {
  std::vector<std::uint8_t> bytes(mask.data.size());
  for (std::size_t i = 0; i < mask.data.size(); ++i) bytes[i] = mask.data[i] ? 255 : 0;
  write_png8(path, mask.width, mask.height, 1, bytes.data());
}

}  // namespace sf
