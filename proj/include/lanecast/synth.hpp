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

// Synthetic highway clips for desk-scale experiments: a scrolling textured
// road with dashed lane markings and one tracked vehicle rectangle. Lane
// changes move the vehicle across a marking with a smoothstep lateral
// profile; the event frame is where the rectangle's bottom-center crosses
// the marking. Rendering is purely hash-driven, so identical seeds give
// identical pixels.

#pragma once

#include <atomic>

#include "lanecast/dataset.hpp"
#include "lanecast/image.hpp"

namespace lanecast {

struct SynthClip {
  std::vector<Tensor<float>> frames;  // (3, H, W) in [0, 1]
  VehicleTrack track;
};

namespace synthdetail {

inline double hash_noise(std::uint64_t seed, std::int64_t ix, std::int64_t iy) {
  std::uint64_t h = seed ^ 0x9e3779b97f4a7c15ull;
  h = hash_combine(h, static_cast<std::uint64_t>(ix) * 0x9e3779b97f4a7c15ull);
  h = hash_combine(h, static_cast<std::uint64_t>(iy) * 0xc2b2ae3d27d4eb4full);
  return static_cast<double>(h >> 11) / static_cast<double>(1ull << 53);
}

// Smooth value noise on a lattice of the given cell size.
inline double value_noise(std::uint64_t seed, double x, double y, double cell) {
  const double gx = x / cell, gy = y / cell;
  const auto ix = static_cast<std::int64_t>(std::floor(gx));
  const auto iy = static_cast<std::int64_t>(std::floor(gy));
  const double fx = gx - static_cast<double>(ix);
  const double fy = gy - static_cast<double>(iy);
  const double sx = fx * fx * (3.0 - 2.0 * fx);
  const double sy = fy * fy * (3.0 - 2.0 * fy);
  const double v00 = hash_noise(seed, ix, iy);
  const double v10 = hash_noise(seed, ix + 1, iy);
  const double v01 = hash_noise(seed, ix, iy + 1);
  const double v11 = hash_noise(seed, ix + 1, iy + 1);
  return (v00 * (1 - sx) + v10 * sx) * (1 - sy) + (v01 * (1 - sx) + v11 * sx) * sy;
}

inline double smoothstep01(double u) {
  u = std::clamp(u, 0.0, 1.0);
  return u * u * (3.0 - 2.0 * u);
}

}  // namespace synthdetail

inline SynthClip synthesize_clip(ManeuverClass scenario, int length, std::uint64_t seed,
                                 std::size_t width = 192, std::size_t height = 144) {
  if (length < 60) throw ContractError("synthesize_clip: length must be >= 60 frames");
  if (width < 96 || height < 72) throw ConfigError("synthesize_clip: canvas too small");

  Rng rng(hash_combine(seed, std::string("synth")));
  const double margin = static_cast<double>(width) / 16.0;
  const double road_w = static_cast<double>(width) - 2.0 * margin;
  std::array<double, 4> marking_x{};
  for (int i = 0; i < 4; ++i) marking_x[i] = margin + road_w * static_cast<double>(i) / 3.0;
  std::array<double, 3> lane_center{};
  for (int i = 0; i < 3; ++i) lane_center[i] = 0.5 * (marking_x[i] + marking_x[i + 1]);

  // Per-clip draws, all up front so rendering order cannot matter.
  const double veh_w = rng.uniform(30.0, 40.0) * (static_cast<double>(width) / 192.0);
  const double veh_h = rng.uniform(22.0, 30.0) * (static_cast<double>(height) / 144.0);
  const double veh_cy = rng.uniform(0.45, 0.62) * static_cast<double>(height);
  const double scroll = rng.uniform(2.5, 4.0);      // ego-motion, px/frame downward
  const double dash_phase = rng.uniform(0.0, 24.0);
  const double body_r = rng.uniform(0.15, 0.9);
  const double body_g = rng.uniform(0.15, 0.9);
  const double body_b = rng.uniform(0.15, 0.9);
  const double sway_amp = rng.uniform(0.2, 0.6);
  const double sway_period = rng.uniform(29.0, 47.0);
  const int t0 = static_cast<int>(rng.uniform_int(32, std::max(33, length - 36)));
  const int duration = static_cast<int>(rng.uniform_int(24, 34));
  const double start_jitter = rng.uniform(-3.0, 3.0);

  const int start_lane = 1;
  int target_lane = start_lane;
  if (scenario == ManeuverClass::LLC) target_lane = 0;
  if (scenario == ManeuverClass::RLC) target_lane = 2;
  const double x_start = lane_center[start_lane] + start_jitter;
  const double x_end = scenario == ManeuverClass::NLC ? x_start : lane_center[target_lane];

  // Shift the lateral profile in time so the marking crossing lands exactly
  // on an integer frame; that frame is the labeled event.
  double t0_adj = static_cast<double>(t0);
  std::int64_t event_frame = -1;
  if (scenario != ManeuverClass::NLC) {
    const double crossing = scenario == ManeuverClass::LLC ? marking_x[1] : marking_x[2];
    const double q = (crossing - x_start) / (x_end - x_start);
    double lo = 0.0, hi = 1.0;
    for (int i = 0; i < 60; ++i) {
      const double mid = 0.5 * (lo + hi);
      (synthdetail::smoothstep01(mid) < q ? lo : hi) = mid;
    }
    const double u_cross = 0.5 * (lo + hi);
    const double t_cross = static_cast<double>(t0) + u_cross * duration;
    event_frame = std::llround(t_cross);
    t0_adj = static_cast<double>(t0) + (static_cast<double>(event_frame) - t_cross);
  }

  auto lateral = [&](int t) {
    if (scenario == ManeuverClass::NLC) {
      return x_start + sway_amp * std::sin(2.0 * M_PI * static_cast<double>(t) / sway_period);
    }
    const double u = (static_cast<double>(t) - t0_adj) / static_cast<double>(duration);
    return x_start + (x_end - x_start) * synthdetail::smoothstep01(u);
  };

  const std::uint64_t road_seed = hash_combine(seed, std::string("road"));
  const std::uint64_t side_seed = hash_combine(seed, std::string("side"));
  const std::uint64_t body_seed = hash_combine(seed, std::string("body"));

  SynthClip clip;
  clip.frames.reserve(static_cast<std::size_t>(length));
  clip.track.clip_id = "synthetic";
  clip.track.track_id = 0;
  clip.track.frame_rate = 10.0;
  if (event_frame >= 0) {
    clip.track.events.emplace_back(event_frame, scenario);
  }

  const std::size_t plane = width * height;
  for (int t = 0; t < length; ++t) {
    std::vector<float> img(3 * plane);
    const double cx = lateral(t);
    const double world_shift = scroll * static_cast<double>(t);

    for (std::size_t y = 0; y < height; ++y) {
      const double wy = static_cast<double>(y) - world_shift;  // scrolls downward
      for (std::size_t x = 0; x < width; ++x) {
        const double fx = static_cast<double>(x);
        double r, g, b;
        if (fx < margin || fx > static_cast<double>(width) - margin) {
          const double n = synthdetail::value_noise(side_seed, fx, wy, 7.0);
          r = 0.22 + 0.10 * n;
          g = 0.33 + 0.14 * n;
          b = 0.14 + 0.06 * n;
        } else {
          const double n = synthdetail::value_noise(road_seed, fx, wy, 9.0) * 0.7 +
                           synthdetail::value_noise(road_seed + 1, fx, wy, 3.0) * 0.3;
          const double base = 0.30 + 0.13 * (n - 0.5) * 2.0;
          r = g = b = base;
          for (double mx : marking_x) {
            if (std::abs(fx - mx) < 1.0) {
              const double cycle = std::fmod(std::fmod(wy + dash_phase, 24.0) + 24.0, 24.0);
              if (cycle < 12.0) {
                r = g = b = 0.82 + 0.08 * (n - 0.5);
              }
            }
          }
        }
        img[y * width + x] = static_cast<float>(r);
        img[plane + y * width + x] = static_cast<float>(g);
        img[2 * plane + y * width + x] = static_cast<float>(b);
      }
    }

    // Vehicle rectangle with sub-pixel horizontal coverage.
    const double left = cx - veh_w / 2.0, right = cx + veh_w / 2.0;
    const double top = veh_cy - veh_h / 2.0, bottom = veh_cy + veh_h / 2.0;
    const auto y_begin = static_cast<std::ptrdiff_t>(std::floor(top));
    const auto y_end = static_cast<std::ptrdiff_t>(std::ceil(bottom));
    const auto x_begin = static_cast<std::ptrdiff_t>(std::floor(left));
    const auto x_end = static_cast<std::ptrdiff_t>(std::ceil(right));
    for (std::ptrdiff_t y = y_begin; y < y_end; ++y) {
      if (y < 0 || y >= static_cast<std::ptrdiff_t>(height)) continue;
      const double cov_y = std::min<double>(y + 1.0, bottom) - std::max<double>(y, top);
      for (std::ptrdiff_t x = x_begin; x < x_end; ++x) {
        if (x < 0 || x >= static_cast<std::ptrdiff_t>(width)) continue;
        const double cov_x = std::min<double>(x + 1.0, right) - std::max<double>(x, left);
        const double cov = std::clamp(cov_x, 0.0, 1.0) * std::clamp(cov_y, 0.0, 1.0);
        if (cov <= 0.0) continue;
        const double rel_y = (static_cast<double>(y) - top) / veh_h;
        const double n = synthdetail::value_noise(body_seed, static_cast<double>(x) - cx,
                                                  static_cast<double>(y), 5.0);
        double vr = body_r, vg = body_g, vb = body_b;
        if (rel_y < 0.3) {  // window band
          vr *= 0.35;
          vg *= 0.35;
          vb *= 0.45;
        }
        vr = std::clamp(vr + 0.06 * (n - 0.5), 0.0, 1.0);
        vg = std::clamp(vg + 0.06 * (n - 0.5), 0.0, 1.0);
        vb = std::clamp(vb + 0.06 * (n - 0.5), 0.0, 1.0);
        // taillights at the bottom corners
        const double rel_x = (static_cast<double>(x) - left) / veh_w;
        if (rel_y > 0.75 && (rel_x < 0.18 || rel_x > 0.82)) {
          vr = 0.85;
          vg = 0.12;
          vb = 0.10;
        }
        const std::size_t i = static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x);
        img[i] = static_cast<float>(img[i] * (1.0 - cov) + vr * cov);
        img[plane + i] = static_cast<float>(img[plane + i] * (1.0 - cov) + vg * cov);
        img[2 * plane + i] = static_cast<float>(img[2 * plane + i] * (1.0 - cov) + vb * cov);
      }
    }

    clip.frames.push_back(Tensor<float>::from_raw({3, height, width}, std::move(img)));

    Contour contour;
    contour.frame = t;
    contour.vertices = {{left, top}, {right, top}, {right, bottom}, {left, bottom}};
    clip.track.frames.emplace_back(t, std::move(contour));
  }

  clip.track.validate();
  return clip;
}

// Writes a clip as a PNG frame directory plus the annotation CSV pair.
inline void write_clip(const std::string& clip_dir, const SynthClip& clip) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(clip_dir) / "frames");
  for (std::size_t t = 0; t < clip.frames.size(); ++t) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu.png", t);
    write_png_rgb((fs::path(clip_dir) / "frames" / name).string(), clip.frames[t]);
  }
  VehicleTrack track = clip.track;
  track.clip_id = fs::path(clip_dir).filename().string();
  write_annotations(clip_dir, {track});
}

// Frame source over synthetic clips: re-renders a clip on first touch and
// keeps the most recent one per thread.
class SyntheticFrameSource : public FrameSource {
 public:
  struct ClipSpec {
    ManeuverClass scenario;
    int length;
    std::uint64_t seed;
  };

  SyntheticFrameSource(std::map<std::string, ClipSpec> clips, std::size_t width = 192,
                       std::size_t height = 144)
      : clips_(std::move(clips)), width_(width), height_(height) {
    static std::atomic<std::uint64_t> counter{0};
    instance_id_ = ++counter;
  }

  Tensor<float> frame(const std::string& clip_id, std::int64_t frame_index) override {
    auto& cache = cache_slot();
    if (cache.clip_id != clip_id) {
      auto it = clips_.find(clip_id);
      if (it == clips_.end()) throw IoError("unknown synthetic clip " + clip_id);
      cache.clip = synthesize_clip(it->second.scenario, it->second.length, it->second.seed,
                                   width_, height_);
      cache.clip_id = clip_id;
    }
    if (frame_index < 0 ||
        frame_index >= static_cast<std::int64_t>(cache.clip.frames.size())) {
      throw CoverageError("synthetic clip " + clip_id + " has no frame " +
                          std::to_string(frame_index));
    }
    return cache.clip.frames[static_cast<std::size_t>(frame_index)];
  }

 private:
  struct Cache {
    std::string clip_id;
    SynthClip clip;
  };
  Cache& cache_slot() {
    thread_local std::map<std::uint64_t, Cache> slots;
    return slots[instance_id_];
  }

  std::map<std::string, ClipSpec> clips_;
  std::size_t width_;
  std::size_t height_;
  std::uint64_t instance_id_ = 0;
};

// Frame source over clip directories written by write_clip; keeps the most
// recently decoded clip per thread.
class DirectoryFrameSource : public FrameSource {
 public:
  explicit DirectoryFrameSource(std::string root) : root_(std::move(root)) {
    static std::atomic<std::uint64_t> counter{0};
    instance_id_ = ++counter;
  }

  Tensor<float> frame(const std::string& clip_id, std::int64_t frame_index) override {
    namespace fs = std::filesystem;
    char name[32];
    std::snprintf(name, sizeof(name), "%06lld.png", static_cast<long long>(frame_index));
    const fs::path path = fs::path(root_) / clip_id / "frames" / name;
    auto& cache = cache_slot();
    const std::string key = path.string();
    if (cache.path != key) {
      cache.image = read_image_rgb(key);
      cache.path = key;
    }
    return cache.image;
  }

 private:
  struct Cache {
    std::string path;
    Tensor<float> image;
  };
  Cache& cache_slot() {
    thread_local std::map<std::uint64_t, Cache> slots;
    return slots[instance_id_];
  }
  std::string root_;
  std::uint64_t instance_id_ = 0;
};

}  // namespace lanecast
