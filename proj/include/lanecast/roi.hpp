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

// Vehicle-centered square regions of interest: contour -> square box at a
// context scale -> zero-padded crop -> bilinear resize to the network input
// resolution, with [-1, 1] channel standardization.

#pragma once

#include <array>

#include "lanecast/image.hpp"
#include "lanecast/tensor.hpp"

namespace lanecast {

struct Contour {
  std::vector<std::array<double, 2>> vertices;  // (x, y) image pixels
  std::int64_t frame = 0;
};

struct RoiSpec {
  int scale = 2;          // context multiplier, one of {1,2,3,4}
  int output_size = 112;  // network input resolution

  void validate() const {
    if (scale < 1 || scale > 4) {
      throw ConfigError("roi: scale must be in {1,2,3,4}, got " + std::to_string(scale));
    }
    if (output_size <= 0) throw ConfigError("roi: output size must be positive");
  }
};

struct RoiBox {
  double cx = 0.0;  // bounding-box center, pixels
  double cy = 0.0;
  double side = 0.0;  // square side, pixels
};

// side = scale * max(bbox width, bbox height), centered on the bbox center.
inline RoiBox square_box(const Contour& contour, int scale) {
  if (contour.vertices.size() < 3) {
    throw GeometryError("square_box: contour needs at least 3 vertices, got " +
                        std::to_string(contour.vertices.size()));
  }
  if (scale < 1 || scale > 4) {
    throw ConfigError("square_box: scale must be in {1,2,3,4}, got " + std::to_string(scale));
  }
  double minx = contour.vertices[0][0], maxx = minx;
  double miny = contour.vertices[0][1], maxy = miny;
  for (const auto& v : contour.vertices) {
    if (!std::isfinite(v[0]) || !std::isfinite(v[1])) {
      throw GeometryError("square_box: non-finite contour vertex");
    }
    minx = std::min(minx, v[0]);
    maxx = std::max(maxx, v[0]);
    miny = std::min(miny, v[1]);
    maxy = std::max(maxy, v[1]);
  }
  const double w = maxx - minx, h = maxy - miny;
  if (w <= 0.0 && h <= 0.0) {
    throw GeometryError("square_box: degenerate contour with zero extent");
  }
  RoiBox box;
  box.cx = 0.5 * (minx + maxx);
  box.cy = 0.5 * (miny + maxy);
  box.side = static_cast<double>(scale) * std::max(w, h);
  return box;
}

struct CropResult {
  Tensor<float> image;        // C x S x S, S = round(side)
  bool fully_outside = false; // box had no overlap with the source image
};

// Integer-grid crop with exact zero padding. The crop window starts at
// round(center - S/2) on each axis, which keeps the bbox center within half a
// pixel of the output center for integer contours.
inline CropResult crop_pad(const Tensor<float>& image, const RoiBox& box) {
  if (image.rank() != 3) {
    throw DimensionError("crop_pad: image must be CxHxW, got " + shape_str(image.shape()));
  }
  if (!(box.side > 0.0) || !std::isfinite(box.side) || !std::isfinite(box.cx) ||
      !std::isfinite(box.cy)) {
    throw GeometryError("crop_pad: invalid box");
  }
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::size_t s = static_cast<std::size_t>(std::max<long>(1, std::lround(box.side)));
  // round-half-up keeps the start consistent on both sides of zero
  const auto window_start = [s](double center) {
    return static_cast<std::ptrdiff_t>(
        std::floor(center - static_cast<double>(s) / 2.0 + 0.5));
  };
  const std::ptrdiff_t x0 = window_start(box.cx);
  const std::ptrdiff_t y0 = window_start(box.cy);

  CropResult result;
  std::vector<float> out(c * s * s, 0.0f);
  const std::ptrdiff_t sx_end = x0 + static_cast<std::ptrdiff_t>(s);
  const std::ptrdiff_t sy_end = y0 + static_cast<std::ptrdiff_t>(s);
  result.fully_outside = sx_end <= 0 || sy_end <= 0 || x0 >= static_cast<std::ptrdiff_t>(w) ||
                         y0 >= static_cast<std::ptrdiff_t>(h);
  if (!result.fully_outside) {
    const float* src = image.data().data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t r = 0; r < s; ++r) {
        const std::ptrdiff_t sy = y0 + static_cast<std::ptrdiff_t>(r);
        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
        const std::size_t col_begin = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -x0));
        const std::size_t col_end = static_cast<std::size_t>(
            std::min<std::ptrdiff_t>(s, static_cast<std::ptrdiff_t>(w) - x0));
        if (col_begin >= col_end) continue;
        const float* srow = src + (ch * h + static_cast<std::size_t>(sy)) * w;
        float* drow = out.data() + (ch * s + r) * s;
        for (std::size_t cc = col_begin; cc < col_end; ++cc) {
          drow[cc] = srow[static_cast<std::size_t>(x0 + static_cast<std::ptrdiff_t>(cc))];
        }
      }
    }
  }
  result.image = Tensor<float>::from_raw({c, s, s}, std::move(out));
  return result;
}

inline Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t out_h,
                                     std::size_t out_w) {
  if (image.rank() != 3) {
    throw DimensionError("resize_bilinear: image must be CxHxW, got " + shape_str(image.shape()));
  }
  if (out_h == 0 || out_w == 0) throw DimensionError("resize_bilinear: empty output");
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (h == out_h && w == out_w) return image.detach_copy();
  std::vector<float> out(c * out_h * out_w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    bilinear_resize_plane(image.data().data() + ch * h * w, h, w,
                          out.data() + ch * out_h * out_w, out_h, out_w);
  }
  return Tensor<float>::from_raw({c, out_h, out_w}, std::move(out));
}

inline Tensor<float> normalize_channels(const Tensor<float>& image, float mean = 0.5f,
                                        float stddev = 0.5f) {
  if (stddev <= 0.0f) throw ConfigError("normalize_channels: stddev must be positive");
  std::vector<float> out(image.data().begin(), image.data().end());
  const float inv = 1.0f / stddev;
  for (float& v : out) v = (v - mean) * inv;
  return Tensor<float>::from_raw(image.shape(), std::move(out));
}

// Square crop -> output_size x output_size, standardized per channel.
inline Tensor<float> resize_normalize(const Tensor<float>& crop, int output_size,
                                      float mean = 0.5f, float stddev = 0.5f) {
  if (crop.rank() != 3) {
    throw DimensionError("resize_normalize: crop must be CxHxW, got " + shape_str(crop.shape()));
  }
  if (crop.dim(1) != crop.dim(2)) {
    throw DimensionError("resize_normalize: crop must be square, got " + shape_str(crop.shape()));
  }
  if (output_size <= 0) throw DimensionError("resize_normalize: empty output");
  return normalize_channels(
      resize_bilinear(crop, static_cast<std::size_t>(output_size),
                      static_cast<std::size_t>(output_size)),
      mean, stddev);
}

}  // namespace lanecast
