/*
 * Copyright 2026 The Lanecast Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Image I/O and pixel helpers. Images are Tensor<float> in [0,1]:
// (3, H, W) for color, (H, W) for grayscale. PNG via libpng, PGM as P5.

#pragma once

#include <png.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <memory>

#include "lanecast/tensor.hpp"

namespace lanecast {

inline std::uint8_t to_byte(float v) {
  const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

// Rec.601 luma; the fixed convention for all grayscale conversions here.
inline Tensor<float> rgb_to_gray(const Tensor<float>& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) {
    throw DimensionError("rgb_to_gray: need 3xHxW, got " + shape_str(rgb.shape()));
  }
  const std::size_t h = rgb.dim(1), w = rgb.dim(2), plane = h * w;
  std::vector<float> gray(plane);
  const float* p = rgb.data().data();
  for (std::size_t i = 0; i < plane; ++i) {
    gray[i] = 0.299f * p[i] + 0.587f * p[plane + i] + 0.114f * p[2 * plane + i];
  }
  return Tensor<float>::from_raw({h, w}, std::move(gray));
}

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline void write_png_rgb(const std::string& path, const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("write_png_rgb: need 3xHxW, got " + shape_str(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError("cannot open " + path + " for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng write failed for " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<std::uint8_t> row(w * 3);
  const float* p = image.data().data();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      row[3 * x + 0] = to_byte(p[y * w + x]);
      row[3 * x + 1] = to_byte(p[plane + y * w + x]);
      row[3 * x + 2] = to_byte(p[2 * plane + y * w + x]);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline Tensor<float> read_png_rgb(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError("cannot open " + path);
  std::uint8_t sig[8] = {};
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw ParseError(path + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError("libpng failed to decode " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  // Normalize everything to 8-bit RGB.
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_set_interlace_handling(png);
  png_read_update_info(png, info);

  const std::size_t w = png_get_image_width(png, info);
  const std::size_t h = png_get_image_height(png, info);
  std::vector<std::uint8_t> pixels(h * w * 3);
  std::vector<png_bytep> rows(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = pixels.data() + y * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  std::vector<float> data(3 * h * w);
  const std::size_t plane = h * w;
  for (std::size_t i = 0; i < plane; ++i) {
    data[i] = pixels[3 * i + 0] / 255.0f;
    data[plane + i] = pixels[3 * i + 1] / 255.0f;
    data[2 * plane + i] = pixels[3 * i + 2] / 255.0f;
  }
  return Tensor<float>::from_raw({3, h, w}, std::move(data));
}

inline void write_pgm(const std::string& path, const Tensor<float>& gray) {
  if (gray.rank() != 2) {
    throw DimensionError("write_pgm: need HxW, got " + shape_str(gray.shape()));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "P5\n" << gray.dim(1) << " " << gray.dim(0) << "\n255\n";
  for (float v : gray.data()) out.put(static_cast<char>(to_byte(v)));
  if (!out) throw IoError("write failed for " + path);
}

inline Tensor<float> read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw ParseError(path + ": expected binary PGM (P5)");
  auto next_token = [&in, &path]() -> long {
    // Skip whitespace and '#' comments between header fields.
    while (true) {
      const int c = in.peek();
      if (c == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    long v = -1;
    in >> v;
    if (!in || v < 0) throw ParseError(path + ": bad PGM header");
    return v;
  };
  const long w = next_token();
  const long h = next_token();
  const long maxval = next_token();
  if (maxval <= 0 || maxval > 255) throw ParseError(path + ": unsupported PGM maxval");
  in.get();  // single whitespace after maxval
  std::vector<float> data(static_cast<std::size_t>(w) * static_cast<std::size_t>(h));
  for (float& v : data) {
    const int c = in.get();
    if (c == EOF) throw ParseError(path + ": truncated PGM payload");
    v = static_cast<float>(c) / static_cast<float>(maxval);
  }
  return Tensor<float>::from_raw({static_cast<std::size_t>(h), static_cast<std::size_t>(w)},
                                 std::move(data));
}

// Reads PNG or PGM by signature; always returns 3xHxW.
inline Tensor<float> read_image_rgb(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("cannot open " + path);
  char head[2] = {};
  probe.read(head, 2);
  probe.close();
  if (head[0] == 'P' && head[1] == '5') {
    Tensor<float> g = read_pgm(path);
    const std::size_t h = g.dim(0), w = g.dim(1);
    std::vector<float> rgb(3 * h * w);
    for (int c = 0; c < 3; ++c)
      std::copy_n(g.data().begin(), h * w, rgb.begin() + c * h * w);
    return Tensor<float>::from_raw({3, h, w}, std::move(rgb));
  }
  return read_png_rgb(path);
}

inline Tensor<float> read_image_gray(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw IoError("cannot open " + path);
  char head[2] = {};
  probe.read(head, 2);
  probe.close();
  if (head[0] == 'P' && head[1] == '5') return read_pgm(path);
  return rgb_to_gray(read_png_rgb(path));
}

// Bilinear resampling of one plane with half-pixel centers; sample positions
// are clamped to the source rectangle. src and dst must not alias.
inline void bilinear_resize_plane(const float* src, std::size_t sh, std::size_t sw, float* dst,
                                  std::size_t dh, std::size_t dw) {
  const double sy = static_cast<double>(sh) / static_cast<double>(dh);
  const double sx = static_cast<double>(sw) / static_cast<double>(dw);
  for (std::size_t y = 0; y < dh; ++y) {
    double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, 0.0), static_cast<double>(sh - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < dw; ++x) {
      double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, 0.0), static_cast<double>(sw - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = (1.0 - wx) * src[y0 * sw + x0] + wx * src[y0 * sw + x1];
      const double bot = (1.0 - wx) * src[y1 * sw + x0] + wx * src[y1 * sw + x1];
      dst[y * dw + x] = static_cast<float>((1.0 - wy) * top + wy * bot);
    }
  }
}

}  // namespace lanecast
