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

#include <catch2/catch_amalgamated.hpp>

#include "lanecast/roi.hpp"

using namespace lanecast;

namespace {

Contour rect_contour(double cx, double cy, double w, double h) {
  Contour c;
  c.vertices = {{cx - w / 2, cy - h / 2},
                {cx + w / 2, cy - h / 2},
                {cx + w / 2, cy + h / 2},
                {cx - w / 2, cy + h / 2}};
  return c;
}

Tensor<float> smooth_texture(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> ax(5), ay(5), ph(5);
  for (int i = 0; i < 5; ++i) {
    ax[i] = rng.uniform(0.02, 0.08);
    ay[i] = rng.uniform(0.02, 0.08);
    ph[i] = rng.uniform(0, 2 * M_PI);
  }
  std::vector<float> img(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double v = 0.5;
      for (int i = 0; i < 5; ++i) v += 0.08 * std::sin(ax[i] * x + ay[i] * y + ph[i]);
      img[y * w + x] = static_cast<float>(v);
    }
  std::vector<float> rgb(3 * h * w);
  for (int c = 0; c < 3; ++c) std::copy_n(img.begin(), h * w, rgb.begin() + c * h * w);
  return Tensor<float>({3, h, w}, std::move(rgb));
}

}  // namespace

TEST_CASE("square box side and center") {
  SECTION("wide bbox, scale 2") {
    Contour c = rect_contour(100, 80, 40, 30);
    RoiBox box = square_box(c, 2);
    CHECK(box.cx == 100.0);
    CHECK(box.cy == 80.0);
    CHECK(box.side == 80.0);
  }
  SECTION("same contour, scale 1") {
    Contour c = rect_contour(100, 80, 40, 30);
    CHECK(square_box(c, 1).side == 40.0);
  }
  SECTION("square contour scales linearly") {
    Contour c = rect_contour(60, 60, 50, 50);
    for (int k = 1; k <= 4; ++k) CHECK(square_box(c, k).side == 50.0 * k);
  }
  SECTION("degenerate contour is a geometry error") {
    Contour c;
    c.vertices = {{5, 5}, {5, 5}, {5, 5}};
    CHECK_THROWS_AS(square_box(c, 1), GeometryError);
  }
  SECTION("too few vertices") {
    Contour c;
    c.vertices = {{0, 0}, {1, 1}};
    CHECK_THROWS_AS(square_box(c, 1), GeometryError);
  }
  SECTION("scale outside the supported set") {
    Contour c = rect_contour(10, 10, 4, 4);
    CHECK_THROWS_AS(square_box(c, 5), ConfigError);
    CHECK_THROWS_AS(square_box(c, 0), ConfigError);
  }
}

TEST_CASE("crop with zero padding") {
  // 1 x 10 x 10 ramp, value = row * 10 + col
  std::vector<float> ramp(100);
  for (int i = 0; i < 100; ++i) ramp[i] = static_cast<float>(i);
  Tensor<float> img({1, 10, 10}, std::move(ramp));

  SECTION("fully interior crop equals the sub-image") {
    CropResult res = crop_pad(img, {5.0, 5.0, 4.0});
    REQUIRE(res.image.shape() == Shape{1, 4, 4});
    CHECK_FALSE(res.fully_outside);
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c)
        CHECK(res.image.data()[r * 4 + c] == static_cast<float>((r + 3) * 10 + (c + 3)));
  }
  SECTION("left half outside pads with exact zeros") {
    CropResult res = crop_pad(img, {0.0, 5.0, 6.0});
    REQUIRE(res.image.shape() == Shape{1, 6, 6});
    CHECK_FALSE(res.fully_outside);
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 3; ++c) CHECK(res.image.data()[r * 6 + c] == 0.0f);
    // first interior column of row 0 comes from source row 2, col 0
    CHECK(res.image.data()[0 * 6 + 3] == 20.0f);
  }
  SECTION("fully outside yields zeros and the warning flag") {
    CropResult res = crop_pad(img, {-20.0, -20.0, 5.0});
    CHECK(res.fully_outside);
    for (float v : res.image.data()) CHECK(v == 0.0f);
  }
}

TEST_CASE("crop centering across a fixture grid") {
  // Single marked pixel at the bbox center must land within half a pixel of
  // the output center, for boxes at every image corner and scale.
  const std::size_t H = 40, W = 60;
  for (int scale = 1; scale <= 4; ++scale) {
    for (auto [cx, cy] : std::vector<std::pair<int, int>>{
             {0, 0}, {59, 0}, {0, 39}, {59, 39}, {30, 20}, {5, 35}, {58, 2}}) {
      std::vector<float> vals(H * W, 0.0f);
      vals[static_cast<std::size_t>(cy) * W + static_cast<std::size_t>(cx)] = 1.0f;
      Tensor<float> img({1, H, W}, std::move(vals));
      // odd bbox extent 11 keeps the center on the integer grid
      Contour contour = rect_contour(cx, cy, 11, 11);
      RoiBox box = square_box(contour, scale);
      CropResult res = crop_pad(img, box);
      const std::size_t s = res.image.dim(1);
      REQUIRE(s == static_cast<std::size_t>(11 * scale));
      double found_r = -1, found_c = -1;
      for (std::size_t r = 0; r < s; ++r)
        for (std::size_t c = 0; c < s; ++c)
          if (res.image.data()[r * s + c] == 1.0f) {
            found_r = static_cast<double>(r);
            found_c = static_cast<double>(c);
          }
      REQUIRE(found_r >= 0);
      const double center = (static_cast<double>(s) - 1.0) / 2.0;
      CHECK(std::abs(found_r - center) <= 0.5);
      CHECK(std::abs(found_c - center) <= 0.5);
    }
  }
}

TEST_CASE("full chain output size over corner fixtures") {
  const std::size_t H = 40, W = 60;
  Tensor<float> img = smooth_texture(H, W, 7);
  RoiSpec spec;
  for (int scale = 1; scale <= 4; ++scale) {
    for (auto [cx, cy] : std::vector<std::pair<double, double>>{
             {0, 0}, {59, 0}, {0, 39}, {59, 39}, {30, 20}, {-10, 20}, {70, 45}}) {
      Contour contour = rect_contour(cx, cy, 13, 9);
      RoiBox box = square_box(contour, scale);
      CropResult crop = crop_pad(img, box);
      Tensor<float> out = resize_normalize(crop.image, spec.output_size);
      REQUIRE(out.shape() == Shape{3, 112, 112});
      for (float v : out.data()) REQUIRE(std::isfinite(v));
    }
  }
}

TEST_CASE("bilinear resize behavior") {
  SECTION("identity at equal size") {
    Tensor<float> img = smooth_texture(112, 112, 3);
    Tensor<float> out = resize_bilinear(img, 112, 112);
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(out.data()[i] == img.data()[i]);
  }
  SECTION("constant image upscales to the same constant") {
    Tensor<float> img = Tensor<float>::full({3, 56, 56}, 0.37f);
    Tensor<float> out = resize_bilinear(img, 112, 112);
    for (float v : out.data()) CHECK_THAT(v, Catch::Matchers::WithinAbs(0.37, 1e-6));
  }
  SECTION("checkerboard downscale preserves the mean") {
    std::vector<float> vals(224 * 224);
    for (std::size_t y = 0; y < 224; ++y)
      for (std::size_t x = 0; x < 224; ++x) vals[y * 224 + x] = ((x + y) % 2) ? 1.0f : 0.0f;
    double src_mean = 0.0;
    for (float v : vals) src_mean += v;
    src_mean /= vals.size();
    Tensor<float> img({1, 224, 224}, std::move(vals));
    Tensor<float> out = resize_bilinear(img, 112, 112);
    double dst_mean = 0.0;
    for (float v : out.data()) dst_mean += v;
    dst_mean /= out.size();
    CHECK_THAT(dst_mean, Catch::Matchers::WithinAbs(src_mean, 1e-3));
  }
  SECTION("empty output rejected") {
    Tensor<float> img = Tensor<float>::full({1, 8, 8}, 0.5f);
    CHECK_THROWS_AS(resize_bilinear(img, 0, 8), DimensionError);
  }
}

TEST_CASE("normalization maps [0,1] to [-1,1]") {
  Tensor<float> img({1, 1, 3}, {0.0f, 0.5f, 1.0f});
  Tensor<float> out = normalize_channels(img);
  CHECK(out.data()[0] == -1.0f);
  CHECK(out.data()[1] == 0.0f);
  CHECK(out.data()[2] == 1.0f);
}

TEST_CASE("context nesting across scales") {
  // The central region of the x(k+1) crop matches the xk crop after both are
  // brought to the same resolution.
  const std::size_t H = 120, W = 160;
  Tensor<float> img = smooth_texture(H, W, 11);
  Contour contour = rect_contour(80, 60, 21, 15);
  for (int k = 1; k <= 3; ++k) {
    RoiBox box_k = square_box(contour, k);
    RoiBox box_k1 = square_box(contour, k + 1);
    Tensor<float> crop_k = crop_pad(img, box_k).image;
    Tensor<float> crop_k1 = crop_pad(img, box_k1).image;
    RoiBox central{(crop_k1.dim(2) - 1.0) / 2.0, (crop_k1.dim(1) - 1.0) / 2.0, box_k.side};
    Tensor<float> inner = crop_pad(crop_k1, central).image;
    Tensor<float> a = resize_bilinear(crop_k, 64, 64);
    Tensor<float> b = resize_bilinear(inner, 64, 64);
    double diff = 0.0;
    std::size_t count = 0;
    for (std::size_t y = 4; y < 60; ++y)
      for (std::size_t x = 4; x < 60; ++x)
        for (std::size_t c = 0; c < 3; ++c) {
          diff += std::abs(a.data()[(c * 64 + y) * 64 + x] - b.data()[(c * 64 + y) * 64 + x]);
          ++count;
        }
    CHECK(diff / static_cast<double>(count) < 0.02);
  }
}
