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

// Dense optical flow by quadratic polynomial expansion.
//
// Each pixel neighborhood is fit to f(p + d) ~ d'Ad + b'd + c under Gaussian
// weights; matching the expansions of two frames yields a per-pixel linear
// constraint on the displacement, which is aggregated over a window and
// solved, coarse to fine over an image pyramid with the running estimate
// pre-warping the second frame's coefficients.
//
// Coordinates: x = column, y = row; flow (u, v) is the displacement that
// moves frame-a content onto frame b, in pixels of the frame's own scale.

#pragma once

#include <array>
#include <cstring>
#include <fstream>

#include "lanecast/image.hpp"
#include "lanecast/tensor.hpp"

namespace lanecast {

struct FlowField {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> u;  // row-major width*height
  std::vector<float> v;

  static FlowField zeros(std::size_t width, std::size_t height) {
    FlowField f;
    f.width = width;
    f.height = height;
    f.u.assign(width * height, 0.0f);
    f.v.assign(width * height, 0.0f);
    return f;
  }
};

// Per-pixel quadratic model planes. A is symmetric: [axx axy; axy ayy].
struct ExpansionCoefficients {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> axx, axy, ayy, bx, by, c;
};

struct FlowParams {
  int levels = 3;
  int window_radius = 5;   // polynomial expansion neighborhood radius
  double sigma = 1.1;      // expansion weight stddev
  int iterations = 3;      // refinement passes per level
  int aggregation_radius = 7;
};

struct FlowStats {
  std::size_t singular_pixels = 0;  // summed over all refinement passes
};

namespace flowdetail {

inline std::size_t reflect101(std::ptrdiff_t i, std::size_t n) {
  const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(n) - 1;
  while (i < 0 || i > last) {
    if (i < 0) i = -i;
    if (i > last) i = 2 * last - i;
  }
  return static_cast<std::size_t>(i);
}

// out(y,x) = sum_t k[t+r] * in(y, x+t), reflect-101 at borders.
inline void correlate_rows(const std::vector<double>& in, std::size_t h, std::size_t w,
                           const std::vector<double>& kernel, std::vector<double>& out) {
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  out.resize(h * w);
  parallel_for(h, [&](std::size_t y0, std::size_t y1) {
    for (std::size_t y = y0; y < y1; ++y) {
      const double* row = in.data() + y * w;
      double* orow = out.data() + y * w;
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (std::ptrdiff_t t = -r; t <= r; ++t) {
          acc += kernel[t + r] * row[reflect101(static_cast<std::ptrdiff_t>(x) + t, w)];
        }
        orow[x] = acc;
      }
    }
  }, 16);
}

// out(y,x) = sum_t k[t+r] * in(y+t, x)
inline void correlate_cols(const std::vector<double>& in, std::size_t h, std::size_t w,
                           const std::vector<double>& kernel, std::vector<double>& out) {
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  out.resize(h * w);
  parallel_for(h, [&](std::size_t y0, std::size_t y1) {
    for (std::size_t y = y0; y < y1; ++y) {
      double* orow = out.data() + y * w;
      for (std::size_t x = 0; x < w; ++x) orow[x] = 0.0;
      for (std::ptrdiff_t t = -r; t <= r; ++t) {
        const double k = kernel[t + r];
        const double* irow =
            in.data() + reflect101(static_cast<std::ptrdiff_t>(y) + t, h) * w;
        for (std::size_t x = 0; x < w; ++x) orow[x] += k * irow[x];
      }
    }
  }, 16);
}

struct ExpansionSetup {
  std::vector<double> k0, k1, k2;  // w(t), t*w(t), t^2*w(t)
  double m2 = 0.0;                 // sum w t^2
  // Inverse of the coupled (1, dx^2, dy^2) Gram block.
  std::array<std::array<double, 3>, 3> inv3{};
  double inv_m2 = 0.0;
  double inv_m22 = 0.0;

  ExpansionSetup(int radius, double sigma) {
    if (radius < 1) throw ConfigError("polynomial expansion: window radius must be >= 1");
    if (sigma <= 0.0) throw ConfigError("polynomial expansion: sigma must be positive");
    const int n = 2 * radius + 1;
    k0.resize(n);
    k1.resize(n);
    k2.resize(n);
    double norm = 0.0;
    for (int t = -radius; t <= radius; ++t) {
      const double g = std::exp(-0.5 * (t * t) / (sigma * sigma));
      k0[t + radius] = g;
      norm += g;
    }
    double m4 = 0.0;
    for (int t = -radius; t <= radius; ++t) {
      k0[t + radius] /= norm;  // 2-D weights (k0 x k0) now sum to 1
      k1[t + radius] = t * k0[t + radius];
      k2[t + radius] = static_cast<double>(t) * t * k0[t + radius];
      m2 += k2[t + radius];
      m4 += static_cast<double>(t) * t * t * t * k0[t + radius];
    }
    const double m22 = m2 * m2;  // separable weights: sum w dx^2 dy^2

    // Gram block over basis (1, dx^2, dy^2):
    //   [ 1   m2   m2 ]
    //   [ m2  m4   m22]
    //   [ m2  m22  m4 ]
    const std::array<std::array<double, 3>, 3> g{{{1.0, m2, m2}, {m2, m4, m22}, {m2, m22, m4}}};
    const double det = g[0][0] * (g[1][1] * g[2][2] - g[1][2] * g[2][1]) -
                       g[0][1] * (g[1][0] * g[2][2] - g[1][2] * g[2][0]) +
                       g[0][2] * (g[1][0] * g[2][1] - g[1][1] * g[2][0]);
    if (std::abs(det) < 1e-12 || m2 < 1e-12 || m22 < 1e-12) {
      throw ConfigError("polynomial expansion: degenerate weight kernel (sigma too small)");
    }
    const double inv_det = 1.0 / det;
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        const int i1 = (i + 1) % 3, i2 = (i + 2) % 3, j1 = (j + 1) % 3, j2 = (j + 2) % 3;
        inv3[j][i] = (g[i1][j1] * g[i2][j2] - g[i1][j2] * g[i2][j1]) * inv_det;
      }
    }
    inv_m2 = 1.0 / m2;
    inv_m22 = 1.0 / m22;
  }
};

inline void downsample2(const std::vector<float>& in, std::size_t h, std::size_t w,
                        std::vector<float>& out, std::size_t& oh, std::size_t& ow) {
  static const std::vector<double> k{1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
  std::vector<double> tmp(in.begin(), in.end()), blurred;
  correlate_rows(tmp, h, w, k, blurred);
  correlate_cols(blurred, h, w, k, tmp);
  oh = (h + 1) / 2;
  ow = (w + 1) / 2;
  out.resize(oh * ow);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) out[y * ow + x] = static_cast<float>(tmp[2 * y * w + 2 * x]);
}

}  // namespace flowdetail

// Weighted least-squares quadratic fit of every pixel neighborhood, computed
// with separable correlations. Degenerate (constant) neighborhoods yield
// A = 0, b = 0, c = value.
inline ExpansionCoefficients polynomial_expansion(const Tensor<float>& image, int window_radius,
                                                  double sigma) {
  if (image.rank() != 2) {
    throw DimensionError("polynomial_expansion: need HxW grayscale, got " +
                         shape_str(image.shape()));
  }
  const std::size_t h = image.dim(0), w = image.dim(1);
  const std::size_t min_extent = 2 * static_cast<std::size_t>(window_radius) + 1;
  if (h < min_extent || w < min_extent) {
    throw DimensionError("polynomial_expansion: image " + shape_str(image.shape()) +
                         " smaller than expansion window " + std::to_string(min_extent));
  }
  const flowdetail::ExpansionSetup setup(window_radius, sigma);

  std::vector<double> f(image.data().begin(), image.data().end());
  std::vector<double> s0, s1, s2, p1, px, py, pxx, pyy, pxy;
  flowdetail::correlate_cols(f, h, w, setup.k0, s0);
  flowdetail::correlate_cols(f, h, w, setup.k1, s1);
  flowdetail::correlate_cols(f, h, w, setup.k2, s2);
  flowdetail::correlate_rows(s0, h, w, setup.k0, p1);
  flowdetail::correlate_rows(s0, h, w, setup.k1, px);
  flowdetail::correlate_rows(s1, h, w, setup.k0, py);
  flowdetail::correlate_rows(s0, h, w, setup.k2, pxx);
  flowdetail::correlate_rows(s2, h, w, setup.k0, pyy);
  flowdetail::correlate_rows(s1, h, w, setup.k1, pxy);

  ExpansionCoefficients out;
  out.width = w;
  out.height = h;
  const std::size_t n = h * w;
  out.axx.resize(n);
  out.axy.resize(n);
  out.ayy.resize(n);
  out.bx.resize(n);
  out.by.resize(n);
  out.c.resize(n);
  const auto& inv3 = setup.inv3;
  for (std::size_t i = 0; i < n; ++i) {
    out.bx[i] = static_cast<float>(px[i] * setup.inv_m2);
    out.by[i] = static_cast<float>(py[i] * setup.inv_m2);
    // Model term r6*dx*dy gives A12 = r6/2.
    out.axy[i] = static_cast<float>(0.5 * pxy[i] * setup.inv_m22);
    const double r1 = inv3[0][0] * p1[i] + inv3[0][1] * pxx[i] + inv3[0][2] * pyy[i];
    const double r4 = inv3[1][0] * p1[i] + inv3[1][1] * pxx[i] + inv3[1][2] * pyy[i];
    const double r5 = inv3[2][0] * p1[i] + inv3[2][1] * pxx[i] + inv3[2][2] * pyy[i];
    out.c[i] = static_cast<float>(r1);
    out.axx[i] = static_cast<float>(r4);
    out.ayy[i] = static_cast<float>(r5);
  }
  return out;
}

struct DisplacementResult {
  FlowField flow;
  std::size_t singular_pixels = 0;
};

// One displacement pass: match the two expansions around the prior estimate,
// aggregate the per-pixel constraints over a box window, solve 2x2 systems.
// Singular systems keep the prior (zero update) and are counted.
inline DisplacementResult displacement_from_expansions(const ExpansionCoefficients& a,
                                                       const ExpansionCoefficients& b,
                                                       const FlowField& prior,
                                                       int aggregation_radius) {
  if (a.width != b.width || a.height != b.height || prior.width != a.width ||
      prior.height != a.height) {
    throw DimensionError("displacement_from_expansions: mismatched field dimensions");
  }
  if (aggregation_radius < 0) {
    throw ConfigError("displacement_from_expansions: aggregation radius must be >= 0");
  }
  const std::size_t w = a.width, h = a.height, n = w * h;
  constexpr int kBorder = 5;  // linear confidence ramp near the frame edge

  std::vector<double> g11(n), g12(n), g22(n), h1(n), h2(n);
  parallel_for(h, [&](std::size_t y0, std::size_t y1) {
    for (std::size_t y = y0; y < y1; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t i = y * w + x;
        const double du = prior.u[i], dv = prior.v[i];
        const std::ptrdiff_t tx = static_cast<std::ptrdiff_t>(std::lround(x + du));
        const std::ptrdiff_t ty = static_cast<std::ptrdiff_t>(std::lround(y + dv));
        double axx, axy, ayy, dbx, dby;
        if (tx >= 0 && tx < static_cast<std::ptrdiff_t>(w) && ty >= 0 &&
            ty < static_cast<std::ptrdiff_t>(h)) {
          const std::size_t j = static_cast<std::size_t>(ty) * w + static_cast<std::size_t>(tx);
          axx = 0.5 * (a.axx[i] + b.axx[j]);
          axy = 0.5 * (a.axy[i] + b.axy[j]);
          ayy = 0.5 * (a.ayy[i] + b.ayy[j]);
          dbx = -0.5 * (b.bx[j] - a.bx[i]) + (axx * du + axy * dv);
          dby = -0.5 * (b.by[j] - a.by[i]) + (axy * du + ayy * dv);
        } else {
          // Warp target is outside the frame; constrain towards the prior.
          axx = a.axx[i];
          axy = a.axy[i];
          ayy = a.ayy[i];
          dbx = axx * du + axy * dv;
          dby = axy * du + ayy * dv;
        }
        const std::size_t dist =
            std::min(std::min(x, w - 1 - x), std::min(y, h - 1 - y));
        if (dist < kBorder) {
          const double scale = (static_cast<double>(dist) + 1.0) / (kBorder + 1.0);
          axx *= scale;
          axy *= scale;
          ayy *= scale;
          dbx *= scale;
          dby *= scale;
        }
        g11[i] = axx * axx + axy * axy;
        g12[i] = (axx + ayy) * axy;
        g22[i] = ayy * ayy + axy * axy;
        h1[i] = axx * dbx + axy * dby;
        h2[i] = axy * dbx + ayy * dby;
      }
    }
  }, 8);

  if (aggregation_radius > 0) {
    const std::vector<double> box(2 * aggregation_radius + 1,
                                  1.0 / (2.0 * aggregation_radius + 1.0));
    std::vector<double> tmp;
    for (std::vector<double>* plane : {&g11, &g12, &g22, &h1, &h2}) {
      flowdetail::correlate_rows(*plane, h, w, box, tmp);
      flowdetail::correlate_cols(tmp, h, w, box, *plane);
    }
  }

  DisplacementResult result;
  result.flow = FlowField::zeros(w, h);
  std::size_t singular = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double det = g11[i] * g22[i] - g12[i] * g12[i];
    const double trace = g11[i] + g22[i];
    if (trace <= 1e-20 || det <= 1e-8 * trace * trace) {
      result.flow.u[i] = prior.u[i];
      result.flow.v[i] = prior.v[i];
      ++singular;
      continue;
    }
    result.flow.u[i] = static_cast<float>((g22[i] * h1[i] - g12[i] * h2[i]) / det);
    result.flow.v[i] = static_cast<float>((g11[i] * h2[i] - g12[i] * h1[i]) / det);
  }
  result.singular_pixels = singular;
  return result;
}

struct DenseFlowResult {
  FlowField flow;
  FlowStats stats;
};

inline DenseFlowResult dense_flow(const Tensor<float>& frame_a, const Tensor<float>& frame_b,
                                  const FlowParams& params = {}) {
  if (frame_a.rank() != 2 || frame_b.rank() != 2) {
    throw DimensionError("dense_flow: frames must be HxW grayscale");
  }
  if (frame_a.shape() != frame_b.shape()) {
    throw DimensionError("dense_flow: frame shapes differ, " + shape_str(frame_a.shape()) +
                         " vs " + shape_str(frame_b.shape()));
  }
  if (params.levels < 1) throw ConfigError("dense_flow: levels must be >= 1");
  if (params.iterations < 1) throw ConfigError("dense_flow: iterations must be >= 1");

  struct Level {
    std::vector<float> a, b;
    std::size_t h = 0, w = 0;
  };
  const std::size_t min_extent = 2 * static_cast<std::size_t>(params.window_radius) + 1;
  std::vector<Level> pyramid;
  {
    Level base;
    base.a.assign(frame_a.data().begin(), frame_a.data().end());
    base.b.assign(frame_b.data().begin(), frame_b.data().end());
    base.h = frame_a.dim(0);
    base.w = frame_a.dim(1);
    pyramid.push_back(std::move(base));
  }
  // Deeper levels are dropped once the image no longer covers the window.
  for (int l = 1; l < params.levels; ++l) {
    const Level& prev = pyramid.back();
    if ((prev.h + 1) / 2 < min_extent || (prev.w + 1) / 2 < min_extent) break;
    Level next;
    flowdetail::downsample2(prev.a, prev.h, prev.w, next.a, next.h, next.w);
    std::size_t bh = 0, bw = 0;
    flowdetail::downsample2(prev.b, prev.h, prev.w, next.b, bh, bw);
    pyramid.push_back(std::move(next));
  }

  DenseFlowResult result;
  FlowField flow;
  for (std::size_t li = pyramid.size(); li-- > 0;) {
    const Level& level = pyramid[li];
    Tensor<float> la = Tensor<float>::from_raw({level.h, level.w}, level.a);
    Tensor<float> lb = Tensor<float>::from_raw({level.h, level.w}, level.b);
    const ExpansionCoefficients ca =
        polynomial_expansion(la, params.window_radius, params.sigma);
    const ExpansionCoefficients cb =
        polynomial_expansion(lb, params.window_radius, params.sigma);

    if (flow.width == 0) {
      flow = FlowField::zeros(level.w, level.h);
    } else if (flow.width != level.w || flow.height != level.h) {
      FlowField up = FlowField::zeros(level.w, level.h);
      bilinear_resize_plane(flow.u.data(), flow.height, flow.width, up.u.data(), level.h,
                            level.w);
      bilinear_resize_plane(flow.v.data(), flow.height, flow.width, up.v.data(), level.h,
                            level.w);
      const float sx = static_cast<float>(level.w) / static_cast<float>(flow.width);
      const float sy = static_cast<float>(level.h) / static_cast<float>(flow.height);
      for (float& val : up.u) val *= sx;
      for (float& val : up.v) val *= sy;
      flow = std::move(up);
    }

    for (int it = 0; it < params.iterations; ++it) {
      DisplacementResult pass =
          displacement_from_expansions(ca, cb, flow, params.aggregation_radius);
      flow = std::move(pass.flow);
      result.stats.singular_pixels += pass.singular_pixels;
    }
  }
  result.flow = std::move(flow);
  return result;
}

// Stack flow fields into network input channels: (2L, H, W), per-field
// (u, v) pairs in sequence order, clamped to [-clamp, clamp], scaled to
// [-1, 1].
inline Tensor<float> flow_to_channels(const std::vector<FlowField>& flows, float clamp = 20.0f) {
  if (flows.empty()) throw DimensionError("flow_to_channels: empty flow sequence");
  if (clamp <= 0.0f) throw ConfigError("flow_to_channels: clamp must be positive");
  const std::size_t w = flows.front().width, h = flows.front().height, plane = w * h;
  for (const FlowField& f : flows) {
    if (f.width != w || f.height != h) {
      throw DimensionError("flow_to_channels: mixed field sizes");
    }
  }
  std::vector<float> out(2 * flows.size() * plane);
  const float inv = 1.0f / clamp;
  for (std::size_t l = 0; l < flows.size(); ++l) {
    float* uc = out.data() + (2 * l) * plane;
    float* vc = out.data() + (2 * l + 1) * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      uc[i] = std::clamp(flows[l].u[i], -clamp, clamp) * inv;
      vc[i] = std::clamp(flows[l].v[i], -clamp, clamp) * inv;
    }
  }
  return Tensor<float>::from_raw({2 * flows.size(), h, w}, std::move(out));
}

// --- LCFL flow file: "LCFL", u32 width, u32 height (LE), f32 u then v ------

inline void write_flow_file(const std::string& path, const FlowField& field) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write("LCFL", 4);
  const std::uint32_t w = static_cast<std::uint32_t>(field.width);
  const std::uint32_t h = static_cast<std::uint32_t>(field.height);
  out.write(reinterpret_cast<const char*>(&w), 4);
  out.write(reinterpret_cast<const char*>(&h), 4);
  out.write(reinterpret_cast<const char*>(field.u.data()),
            static_cast<std::streamsize>(field.u.size() * sizeof(float)));
  out.write(reinterpret_cast<const char*>(field.v.data()),
            static_cast<std::streamsize>(field.v.size() * sizeof(float)));
  if (!out) throw IoError("write failed for " + path);
}

inline FlowField read_flow_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "LCFL", 4) != 0) {
    throw ParseError(path + ": not a LCFL flow file");
  }
  std::uint32_t w = 0, h = 0;
  in.read(reinterpret_cast<char*>(&w), 4);
  in.read(reinterpret_cast<char*>(&h), 4);
  if (!in || w == 0 || h == 0) throw ParseError(path + ": bad flow dimensions");
  FlowField field = FlowField::zeros(w, h);
  in.read(reinterpret_cast<char*>(field.u.data()),
          static_cast<std::streamsize>(field.u.size() * sizeof(float)));
  in.read(reinterpret_cast<char*>(field.v.data()),
          static_cast<std::streamsize>(field.v.size() * sizeof(float)));
  if (!in) throw ParseError(path + ": truncated flow payload");
  require_finite<float>(field.u, "flow file u plane");
  require_finite<float>(field.v, "flow file v plane");
  return field;
}

// Hue encodes direction, saturation/value encode magnitude (normalized to
// the field's maximum).
inline Tensor<float> flow_to_color(const FlowField& field) {
  const std::size_t plane = field.width * field.height;
  float max_mag = 1e-6f;
  for (std::size_t i = 0; i < plane; ++i) {
    max_mag = std::max(max_mag, std::hypot(field.u[i], field.v[i]));
  }
  std::vector<float> rgb(3 * plane);
  for (std::size_t i = 0; i < plane; ++i) {
    const float mag = std::hypot(field.u[i], field.v[i]) / max_mag;
    const float ang = std::atan2(field.v[i], field.u[i]);  // [-pi, pi]
    const float hue = (ang / (2.0f * static_cast<float>(M_PI)) + 0.5f) * 6.0f;
    const int sector = static_cast<int>(hue) % 6;
    const float frac = hue - std::floor(hue);
    const float p = 1.0f - mag;
    const float q = 1.0f - mag * frac;
    const float t = 1.0f - mag * (1.0f - frac);
    float r = 1, g = 1, b = 1;
    switch (sector) {
      case 0: r = 1; g = t; b = p; break;
      case 1: r = q; g = 1; b = p; break;
      case 2: r = p; g = 1; b = t; break;
      case 3: r = p; g = q; b = 1; break;
      case 4: r = t; g = p; b = 1; break;
      default: r = 1; g = p; b = q; break;
    }
    rgb[i] = r;
    rgb[plane + i] = g;
    rgb[2 * plane + i] = b;
  }
  return Tensor<float>::from_raw({3, field.height, field.width}, std::move(rgb));
}

}  // namespace lanecast
