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

// Windowed sample extraction from annotated vehicle tracks.
//
// A labeled window of horizon N ends at end_frame and covers the N
// consecutive frames before it. It is a positive (LLC/RLC) window when the
// event happens exactly tte frames after end_frame, and a negative (NLC)
// window when the whole span plus a guard band is clear of events; anything
// else is ambiguous and skipped.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>

#include "lanecast/flow.hpp"
#include "lanecast/roi.hpp"

namespace lanecast {

enum class ManeuverClass : int { NLC = 0, LLC = 1, RLC = 2 };

inline const char* to_string(ManeuverClass m) {
  switch (m) {
    case ManeuverClass::NLC: return "NLC";
    case ManeuverClass::LLC: return "LLC";
    default: return "RLC";
  }
}

inline ManeuverClass maneuver_from_string(const std::string& s) {
  if (s == "NLC") return ManeuverClass::NLC;
  if (s == "LLC") return ManeuverClass::LLC;
  if (s == "RLC") return ManeuverClass::RLC;
  throw ParseError("unknown maneuver class '" + s + "'");
}

struct VehicleTrack {
  std::string clip_id;
  std::int64_t track_id = 0;
  std::vector<std::pair<std::int64_t, Contour>> frames;  // strictly increasing indices
  std::vector<std::pair<std::int64_t, ManeuverClass>> events;  // LLC/RLC only
  double frame_rate = 10.0;

  std::int64_t first_frame() const { return frames.front().first; }
  std::int64_t last_frame() const { return frames.back().first; }

  // Index into frames for a frame number, or -1.
  std::ptrdiff_t position_of(std::int64_t frame) const {
    auto it = std::lower_bound(frames.begin(), frames.end(), frame,
                               [](const auto& a, std::int64_t f) { return a.first < f; });
    if (it == frames.end() || it->first != frame) return -1;
    return it - frames.begin();
  }

  // True when frames [begin, end] are all present. Indices are strictly
  // increasing, so presence of both endpoints at the right distance implies
  // presence of everything between.
  bool covers(std::int64_t begin, std::int64_t end) const {
    if (begin > end || frames.empty()) return false;
    const std::ptrdiff_t pe = position_of(end);
    if (pe < 0) return false;
    const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(end - begin);
    if (pe < span) return false;
    return frames[pe - span].first == begin;
  }

  void validate() const {
    if (frames.empty()) throw ValidationError("track " + std::to_string(track_id) + ": no frames");
    if (frame_rate <= 0) {
      throw ValidationError("track " + std::to_string(track_id) + ": bad frame rate");
    }
    for (std::size_t i = 0; i < frames.size(); ++i) {
      if (i > 0 && frames[i].first <= frames[i - 1].first) {
        throw ValidationError("track " + std::to_string(track_id) +
                              ": frame indices not strictly increasing at frame " +
                              std::to_string(frames[i].first));
      }
      if (frames[i].second.vertices.size() < 3) {
        throw ValidationError("track " + std::to_string(track_id) + ": contour at frame " +
                              std::to_string(frames[i].first) + " has fewer than 3 vertices");
      }
    }
    for (const auto& [f, cls] : events) {
      if (cls == ManeuverClass::NLC) {
        throw ValidationError("track " + std::to_string(track_id) + ": NLC cannot be an event");
      }
      if (f < first_frame() || f > last_frame()) {
        throw ValidationError("track " + std::to_string(track_id) + ": event at frame " +
                              std::to_string(f) + " outside the track's frame range");
      }
    }
  }
};

struct WindowSpec {
  int horizon = 20;  // N, frames observed
  int tte = 0;       // frames between window end and the event
  int guard = 10;    // NLC guard band around events

  void validate() const {
    if (horizon < 1) throw ConfigError("window: horizon must be >= 1");
    if (tte < 0) throw ConfigError("window: tte must be >= 0");
    if (guard < 0) throw ConfigError("window: guard must be >= 0");
  }
};

// LLC/RLC when the event lands exactly on end_frame + tte; NLC when
// [end_frame, end_frame + tte + guard] holds no event; otherwise ambiguous
// (nullopt).
inline std::optional<ManeuverClass> label_window(const VehicleTrack& track,
                                                 std::int64_t end_frame, const WindowSpec& spec) {
  spec.validate();
  const std::int64_t begin = end_frame - spec.horizon + 1;
  if (!track.covers(begin, end_frame)) {
    throw CoverageError("track " + std::to_string(track.track_id) + ": window [" +
                        std::to_string(begin) + ", " + std::to_string(end_frame) +
                        "] not fully covered");
  }
  for (const auto& [f, cls] : track.events) {
    if (f == end_frame + spec.tte) return cls;
  }
  for (const auto& [f, cls] : track.events) {
    if (f >= end_frame && f <= end_frame + spec.tte + spec.guard) return std::nullopt;
  }
  return ManeuverClass::NLC;
}

struct WindowRef {
  std::size_t track_index = 0;
  std::string clip_id;
  std::int64_t track_id = 0;
  std::int64_t end_frame = 0;
  ManeuverClass label = ManeuverClass::NLC;
};

// Window enumeration: one positive window per event (ending tte frames
// before it), NLC windows on a stride over stretches whose span stays clear
// of every event's [f - tte - guard, f + tte + guard] zone.
inline std::vector<WindowRef> enumerate_windows(const std::vector<VehicleTrack>& tracks,
                                                const WindowSpec& spec, std::int64_t stride) {
  spec.validate();
  if (stride < 1) throw ConfigError("enumerate_windows: stride must be >= 1");
  std::vector<WindowRef> out;
  for (std::size_t ti = 0; ti < tracks.size(); ++ti) {
    const VehicleTrack& track = tracks[ti];
    for (const auto& [f, cls] : track.events) {
      const std::int64_t end = f - spec.tte;
      if (!track.covers(end - spec.horizon + 1, end)) continue;
      out.push_back({ti, track.clip_id, track.track_id, end, cls});
    }
    for (std::int64_t end = track.first_frame() + spec.horizon - 1; end <= track.last_frame();
         end += stride) {
      if (!track.covers(end - spec.horizon + 1, end)) continue;
      const std::int64_t begin = end - spec.horizon + 1;
      bool clear = true;
      for (const auto& [f, cls] : track.events) {
        const std::int64_t zone_lo = f - spec.tte - spec.guard;
        const std::int64_t zone_hi = f + spec.tte + spec.guard;
        if (begin <= zone_hi && end >= zone_lo) {
          clear = false;
          break;
        }
      }
      if (clear) out.push_back({ti, track.clip_id, track.track_id, end, ManeuverClass::NLC});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sample materialization
// ---------------------------------------------------------------------------

// Pixel provider for (clip, frame). Implementations may cache whole clips;
// frames are (3, H, W) in [0, 1].
class FrameSource {
 public:
  virtual ~FrameSource() = default;
  virtual Tensor<float> frame(const std::string& clip_id, std::int64_t frame_index) = 0;
};

struct FlowStackConfig {
  int fields = 10;          // L flow fields per window
  float clamp = 20.0f;      // pixels mapped to [-1, 1]
  FlowParams flow;          // estimator settings
};

struct SampleWindow {
  std::vector<Tensor<float>> appearance;  // N normalized ROI frames (3, S, S)
  Tensor<float> flow_stack;               // (2L, S, S)
  ManeuverClass label = ManeuverClass::NLC;
  // provenance
  std::string clip_id;
  std::int64_t track_id = 0;
  std::int64_t end_frame = 0;
  WindowSpec window;
  RoiSpec roi;
};

// Evenly spaced index subsample of [0, total), endpoints included.
inline std::vector<std::size_t> uniform_indices(std::size_t count, std::size_t total) {
  if (count == 0 || total == 0) throw ContractError("uniform_indices: empty selection");
  std::vector<std::size_t> idx(count);
  if (count == 1) {
    idx[0] = total - 1;
    return idx;
  }
  for (std::size_t j = 0; j < count; ++j) {
    const double pos = static_cast<double>(j) * static_cast<double>(total - 1) /
                       static_cast<double>(count - 1);
    idx[j] = static_cast<std::size_t>(std::lround(pos));
  }
  return idx;
}

// Builds one sample: per-frame vehicle-centered crops resized to the network
// resolution; flow computed between consecutive resized crops on L uniformly
// subsampled frame pairs.
inline SampleWindow materialize_window(FrameSource& source, const VehicleTrack& track,
                                       const WindowRef& ref, const WindowSpec& spec,
                                       const RoiSpec& roi, const FlowStackConfig& flow_cfg) {
  roi.validate();
  spec.validate();
  if (flow_cfg.fields < 1) throw ConfigError("flow stack: fields must be >= 1");
  const std::int64_t begin = ref.end_frame - spec.horizon + 1;
  if (!track.covers(begin, ref.end_frame)) {
    throw CoverageError("track " + std::to_string(track.track_id) + ": window [" +
                        std::to_string(begin) + ", " + std::to_string(ref.end_frame) +
                        "] not fully covered");
  }

  SampleWindow sample;
  sample.label = ref.label;
  sample.clip_id = ref.clip_id;
  sample.track_id = ref.track_id;
  sample.end_frame = ref.end_frame;
  sample.window = spec;
  sample.roi = roi;

  const std::size_t n = static_cast<std::size_t>(spec.horizon);
  std::vector<Tensor<float>> gray;  // resized, pre-normalization, for flow
  gray.reserve(n);
  sample.appearance.reserve(n);
  const std::ptrdiff_t pos_begin = track.position_of(begin);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& [frame_index, contour] = track.frames[pos_begin + static_cast<std::ptrdiff_t>(i)];
    Tensor<float> frame = source.frame(ref.clip_id, frame_index);
    const RoiBox box = square_box(contour, roi.scale);
    Tensor<float> crop = crop_pad(frame, box).image;
    Tensor<float> resized =
        resize_bilinear(crop, static_cast<std::size_t>(roi.output_size),
                        static_cast<std::size_t>(roi.output_size));
    gray.push_back(rgb_to_gray(resized));
    sample.appearance.push_back(normalize_channels(resized));
  }

  const std::size_t pairs_total = n - 1;
  if (pairs_total == 0) throw ConfigError("flow stack: horizon must be >= 2 for flow pairs");
  const std::vector<std::size_t> pair_idx =
      uniform_indices(static_cast<std::size_t>(flow_cfg.fields), pairs_total);
  std::vector<FlowField> fields;
  fields.reserve(pair_idx.size());
  for (std::size_t p : pair_idx) {
    fields.push_back(dense_flow(gray[p], gray[p + 1], flow_cfg.flow).flow);
  }
  sample.flow_stack = flow_to_channels(fields, flow_cfg.clamp);
  return sample;
}

// Every labelable window at the given stride, materialized. Memory scales
// with the number of windows; large runs should drive materialize_window
// per track instead.
inline std::vector<SampleWindow> enumerate_samples(FrameSource& source,
                                                   const std::vector<VehicleTrack>& tracks,
                                                   const WindowSpec& spec, const RoiSpec& roi,
                                                   std::int64_t stride,
                                                   const FlowStackConfig& flow_cfg = {}) {
  std::vector<SampleWindow> out;
  for (const WindowRef& ref : enumerate_windows(tracks, spec, stride)) {
    out.push_back(materialize_window(source, tracks[ref.track_index], ref, spec, roi, flow_cfg));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Train/validation split, by source track to prevent leakage
// ---------------------------------------------------------------------------

struct SplitResult {
  std::vector<std::size_t> train;  // indices into the input list
  std::vector<std::size_t> val;
  bool single_track_warning = false;
};

template <typename GetKey>
SplitResult split_train_val_by_key(std::size_t count, GetKey&& key_of, double fraction,
                                   std::uint64_t seed) {
  if (count == 0) throw ContractError("split_train_val: empty sample list");
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ContractError("split_train_val: fraction must be in (0, 1)");
  }
  // Unique keys in first-appearance order, then a seeded shuffle.
  std::vector<std::string> keys;
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < count; ++i) {
    const std::string k = key_of(i);
    auto [it, inserted] = members.try_emplace(k);
    if (inserted) keys.push_back(k);
    it->second.push_back(i);
  }
  SplitResult result;
  if (keys.size() == 1) {
    result.train = members[keys[0]];
    result.single_track_warning = true;
    return result;
  }
  std::mt19937_64 engine(seed);
  std::shuffle(keys.begin(), keys.end(), engine);
  const double target = fraction * static_cast<double>(count);
  std::size_t train_count = 0;
  for (const std::string& k : keys) {
    auto& idx = members[k];
    if (static_cast<double>(train_count) < target) {
      result.train.insert(result.train.end(), idx.begin(), idx.end());
      train_count += idx.size();
    } else {
      result.val.insert(result.val.end(), idx.begin(), idx.end());
    }
  }
  std::sort(result.train.begin(), result.train.end());
  std::sort(result.val.begin(), result.val.end());
  return result;
}

inline SplitResult split_train_val(const std::vector<WindowRef>& windows, double fraction,
                                   std::uint64_t seed) {
  return split_train_val_by_key(
      windows.size(),
      [&](std::size_t i) {
        return windows[i].clip_id + "#" + std::to_string(windows[i].track_id);
      },
      fraction, seed);
}

inline SplitResult split_train_val(const std::vector<SampleWindow>& samples, double fraction,
                                   std::uint64_t seed) {
  return split_train_val_by_key(
      samples.size(),
      [&](std::size_t i) {
        return samples[i].clip_id + "#" + std::to_string(samples[i].track_id);
      },
      fraction, seed);
}

// ---------------------------------------------------------------------------
// Class-balanced batch sampling
// ---------------------------------------------------------------------------

// Draws samples with weight inversely proportional to their class frequency:
// every class then carries total weight 1, so each contributes one third of
// a batch in expectation regardless of imbalance.
class BalancedBatchSampler {
 public:
  BalancedBatchSampler(std::vector<ManeuverClass> labels, std::size_t batch_size,
                       std::uint64_t seed)
      : labels_(std::move(labels)), batch_size_(batch_size), rng_(seed) {
    if (batch_size_ < 3) throw ConfigError("balanced_batches: batch size must be >= 3");
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      by_class_[static_cast<int>(labels_[i])].push_back(i);
    }
    for (int c = 0; c < 3; ++c) {
      if (by_class_[c].empty()) {
        throw ConfigError(std::string("balanced_batches: class ") +
                          to_string(static_cast<ManeuverClass>(c)) + " has zero samples");
      }
      weights_[c] = 1.0 / static_cast<double>(by_class_[c].size());
    }
    const double total = weights_[0] + weights_[1] + weights_[2];
    for (double& w : weights_) w /= total;
  }

  // Normalized per-sample weight of each class (proportional to 1/frequency).
  const std::array<double, 3>& class_weights() const { return weights_; }

  std::size_t draw() {
    // Per-sample weights 1/freq make every class equally likely in aggregate.
    const int c = static_cast<int>(rng_.uniform_int(0, 2));
    const auto& pool = by_class_[c];
    return pool[static_cast<std::size_t>(
        rng_.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))];
  }

  std::vector<std::size_t> next_batch() {
    std::vector<std::size_t> batch(batch_size_);
    for (auto& b : batch) b = draw();
    return batch;
  }

 private:
  std::vector<ManeuverClass> labels_;
  std::size_t batch_size_;
  Rng rng_;
  std::array<std::vector<std::size_t>, 3> by_class_;
  std::array<double, 3> weights_{};
};

// ---------------------------------------------------------------------------
// Annotation files: per-clip directory with contours.csv and events.csv
//   contours.csv: track_id,frame,x1;...;xk,y1;...;yk
//   events.csv:   track_id,frame,class
// ---------------------------------------------------------------------------

struct AnnotationLoadResult {
  std::vector<VehicleTrack> tracks;
  std::vector<std::string> warnings;
};

namespace csvdetail {

inline std::vector<std::string> split_fields(const std::string& line, char delim) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(delim, start);
    if (pos == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

inline double parse_number(const std::string& s, const std::string& path, int line_no) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(path + ":" + std::to_string(line_no) + ": cannot parse number '" + s + "'");
  }
}

}  // namespace csvdetail

inline void write_annotations(const std::string& clip_dir,
                              const std::vector<VehicleTrack>& tracks) {
  namespace fs = std::filesystem;
  fs::create_directories(clip_dir);
  std::ofstream contours(fs::path(clip_dir) / "contours.csv");
  std::ofstream events(fs::path(clip_dir) / "events.csv");
  if (!contours || !events) throw IoError("cannot write annotations under " + clip_dir);
  contours << "track_id,frame,xs,ys\n";
  events << "track_id,frame,class\n";
  for (const VehicleTrack& t : tracks) {
    for (const auto& [frame, contour] : t.frames) {
      contours << t.track_id << ',' << frame << ',';
      for (std::size_t i = 0; i < contour.vertices.size(); ++i) {
        contours << (i ? ";" : "") << contour.vertices[i][0];
      }
      contours << ',';
      for (std::size_t i = 0; i < contour.vertices.size(); ++i) {
        contours << (i ? ";" : "") << contour.vertices[i][1];
      }
      contours << '\n';
    }
    for (const auto& [frame, cls] : t.events) {
      events << t.track_id << ',' << frame << ',' << to_string(cls) << '\n';
    }
  }
}

// Loads and validates the annotation pair inside a clip directory. The clip
// id is the directory name. Malformed rows carry file:line diagnostics;
// invariant violations name the track.
inline AnnotationLoadResult load_annotations(const std::string& clip_dir) {
  namespace fs = std::filesystem;
  const fs::path dir(clip_dir);
  const std::string contours_path = (dir / "contours.csv").string();
  const std::string events_path = (dir / "events.csv").string();
  std::ifstream contours(contours_path);
  if (!contours) throw IoError("cannot open " + contours_path);

  AnnotationLoadResult result;
  std::map<std::int64_t, VehicleTrack> by_id;

  std::string line;
  int line_no = 0;
  bool any_row = false;
  while (std::getline(contours, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("track_id", 0) == 0) continue;  // header
    auto fields = csvdetail::split_fields(line, ',');
    if (fields.size() != 4) {
      throw ParseError(contours_path + ":" + std::to_string(line_no) +
                       ": expected 4 comma-separated fields, got " +
                       std::to_string(fields.size()));
    }
    const auto track_id =
        static_cast<std::int64_t>(csvdetail::parse_number(fields[0], contours_path, line_no));
    const auto frame =
        static_cast<std::int64_t>(csvdetail::parse_number(fields[1], contours_path, line_no));
    const auto xs = csvdetail::split_fields(fields[2], ';');
    const auto ys = csvdetail::split_fields(fields[3], ';');
    if (xs.size() != ys.size()) {
      throw ParseError(contours_path + ":" + std::to_string(line_no) +
                       ": x and y vertex counts differ");
    }
    Contour contour;
    contour.frame = frame;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      contour.vertices.push_back({csvdetail::parse_number(xs[i], contours_path, line_no),
                                  csvdetail::parse_number(ys[i], contours_path, line_no)});
    }
    VehicleTrack& track = by_id[track_id];
    track.track_id = track_id;
    track.clip_id = dir.filename().string();
    track.frames.emplace_back(frame, std::move(contour));
    any_row = true;
  }
  if (!any_row) {
    result.warnings.push_back(contours_path + ": no contour rows, empty clip");
  }

  std::ifstream events(events_path);
  if (events) {
    line_no = 0;
    while (std::getline(events, line)) {
      ++line_no;
      if (line.empty()) continue;
      if (line_no == 1 && line.rfind("track_id", 0) == 0) continue;
      auto fields = csvdetail::split_fields(line, ',');
      if (fields.size() != 3) {
        throw ParseError(events_path + ":" + std::to_string(line_no) +
                         ": expected 3 comma-separated fields");
      }
      const auto track_id =
          static_cast<std::int64_t>(csvdetail::parse_number(fields[0], events_path, line_no));
      const auto frame =
          static_cast<std::int64_t>(csvdetail::parse_number(fields[1], events_path, line_no));
      const ManeuverClass cls = maneuver_from_string(fields[2]);
      auto it = by_id.find(track_id);
      if (it == by_id.end()) {
        throw ValidationError(events_path + ":" + std::to_string(line_no) + ": event for track " +
                              std::to_string(track_id) + " which has no contours");
      }
      it->second.events.emplace_back(frame, cls);
    }
  }

  for (auto& [id, track] : by_id) {
    std::sort(track.events.begin(), track.events.end());
    track.validate();
    result.tracks.push_back(std::move(track));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Dataset statistics in the shape of the per-class sequence table
// ---------------------------------------------------------------------------

struct DatasetStats {
  std::array<std::int64_t, 3> sequences{};   // NLC, LLC, RLC
  std::array<double, 3> avg_frames{};        // mean track length per class
};

// Each LLC/RLC event counts one sequence of its class; a track without
// events counts one NLC sequence. Track length enters the average once per
// counted sequence.
inline DatasetStats dataset_stats(const std::vector<VehicleTrack>& tracks) {
  DatasetStats stats;
  std::array<double, 3> frame_sum{};
  for (const VehicleTrack& t : tracks) {
    const double len = static_cast<double>(t.frames.size());
    if (t.events.empty()) {
      stats.sequences[0] += 1;
      frame_sum[0] += len;
      continue;
    }
    for (const auto& [f, cls] : t.events) {
      stats.sequences[static_cast<int>(cls)] += 1;
      frame_sum[static_cast<int>(cls)] += len;
    }
  }
  for (int c = 0; c < 3; ++c) {
    stats.avg_frames[c] =
        stats.sequences[c] ? frame_sum[c] / static_cast<double>(stats.sequences[c]) : 0.0;
  }
  return stats;
}

}  // namespace lanecast
