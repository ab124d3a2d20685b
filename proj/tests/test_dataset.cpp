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

#include <filesystem>
#include <fstream>
#include <set>

#include "lanecast/dataset.hpp"
#include "lanecast/synth.hpp"

using namespace lanecast;

namespace {

Contour box_contour(double cx, double cy, std::int64_t frame) {
  Contour c;
  c.frame = frame;
  c.vertices = {{cx - 5, cy - 4}, {cx + 5, cy - 4}, {cx + 5, cy + 4}, {cx - 5, cy + 4}};
  return c;
}

VehicleTrack make_track(std::int64_t id, std::int64_t first, std::int64_t last,
                        std::vector<std::pair<std::int64_t, ManeuverClass>> events,
                        const std::string& clip = "clip") {
  VehicleTrack t;
  t.clip_id = clip;
  t.track_id = id;
  for (std::int64_t f = first; f <= last; ++f) t.frames.emplace_back(f, box_contour(50, 40, f));
  t.events = std::move(events);
  return t;
}

// Independent labeling oracle: a full scan over the event list using the
// window rules spelled out per operation, written without touching the
// library's enumeration code path.
struct OracleWindow {
  std::int64_t end;
  int label;  // 0/1/2
};

std::vector<OracleWindow> oracle_enumerate(const VehicleTrack& t, const WindowSpec& spec,
                                           std::int64_t stride) {
  std::vector<OracleWindow> out;
  // positives: one per event, ending exactly tte frames before it
  for (const auto& [f, cls] : t.events) {
    const std::int64_t end = f - spec.tte;
    const std::int64_t begin = end - spec.horizon + 1;
    if (begin < t.first_frame() || end > t.last_frame()) continue;
    bool all_present = true;
    for (std::int64_t q = begin; q <= end; ++q) {
      if (t.position_of(q) < 0) all_present = false;
    }
    if (all_present) out.push_back({end, static_cast<int>(cls)});
  }
  // negatives: stride scan, span must stay clear of every widened event zone
  for (std::int64_t end = t.first_frame() + spec.horizon - 1; end <= t.last_frame();
       end += stride) {
    const std::int64_t begin = end - spec.horizon + 1;
    bool all_present = true;
    for (std::int64_t q = begin; q <= end; ++q) {
      if (t.position_of(q) < 0) all_present = false;
    }
    if (!all_present) continue;
    bool clear = true;
    for (const auto& [f, cls] : t.events) {
      for (std::int64_t q = begin; q <= end; ++q) {
        if (q >= f - spec.tte - spec.guard && q <= f + spec.tte + spec.guard) clear = false;
      }
    }
    if (clear) out.push_back({end, 0});
  }
  return out;
}

}  // namespace

TEST_CASE("label_window basic rules") {
  SECTION("prediction window ending ten frames before the event") {
    VehicleTrack t = make_track(1, 0, 199, {{100, ManeuverClass::LLC}});
    WindowSpec spec{20, 10, 10};
    auto label = label_window(t, 90, spec);
    REQUIRE(label.has_value());
    CHECK(*label == ManeuverClass::LLC);
  }
  SECTION("classification window ending at the event") {
    VehicleTrack t = make_track(1, 0, 199, {{100, ManeuverClass::LLC}});
    WindowSpec spec{20, 0, 10};
    auto label = label_window(t, 100, spec);
    REQUIRE(label.has_value());
    CHECK(*label == ManeuverClass::LLC);
  }
  SECTION("event-free track labels NLC everywhere") {
    VehicleTrack t = make_track(1, 0, 199, {});
    WindowSpec spec{20, 10, 10};
    for (std::int64_t end = 19; end <= 199; end += 13) {
      auto label = label_window(t, end, spec);
      REQUIRE(label.has_value());
      CHECK(*label == ManeuverClass::NLC);
    }
  }
  SECTION("near-event windows are ambiguous and skipped") {
    VehicleTrack t = make_track(1, 0, 199, {{100, ManeuverClass::RLC}});
    WindowSpec spec{20, 10, 10};
    CHECK_FALSE(label_window(t, 95, spec).has_value());   // event at end+5
    CHECK_FALSE(label_window(t, 85, spec).has_value());   // event at end+15 (guard)
  }
  SECTION("missing frames raise a coverage error") {
    VehicleTrack t = make_track(1, 50, 199, {});
    WindowSpec spec{20, 0, 10};
    CHECK_THROWS_AS(label_window(t, 60, spec), CoverageError);
  }
}

TEST_CASE("window enumeration matches the brute-force oracle") {
  // one handcrafted case mirroring the single-event layout
  SECTION("single event track, stride 20") {
    VehicleTrack t = make_track(7, 0, 199, {{100, ManeuverClass::LLC}});
    WindowSpec spec{20, 10, 10};
    auto windows = enumerate_windows({t}, spec, 20);
    int llc = 0;
    for (const auto& w : windows) {
      if (w.label == ManeuverClass::LLC) {
        ++llc;
        CHECK(w.end_frame == 90);
      } else {
        // span [end-19, end] must avoid frames 90..120 entirely
        CHECK((w.end_frame < 90 || w.end_frame - 19 > 120));
      }
    }
    CHECK(llc == 1);
  }
  SECTION("too-short track yields nothing") {
    VehicleTrack t = make_track(3, 0, 18, {});
    WindowSpec spec{20, 0, 10};
    CHECK(enumerate_windows({t}, spec, 1).empty());
  }
  SECTION("two events at tte zero") {
    VehicleTrack t = make_track(4, 0, 199, {{100, ManeuverClass::LLC}, {160, ManeuverClass::RLC}});
    WindowSpec spec{20, 0, 10};
    auto windows = enumerate_windows({t}, spec, 20);
    std::vector<std::pair<std::int64_t, ManeuverClass>> positives;
    for (const auto& w : windows) {
      if (w.label != ManeuverClass::NLC) positives.emplace_back(w.end_frame, w.label);
    }
    REQUIRE(positives.size() == 2);
    CHECK(positives[0] == std::make_pair<std::int64_t>(100, ManeuverClass::LLC));
    CHECK(positives[1] == std::make_pair<std::int64_t>(160, ManeuverClass::RLC));
  }
  SECTION("one hundred random tracks, full oracle equivalence") {
    Rng rng(2024);
    for (int trial = 0; trial < 100; ++trial) {
      const std::int64_t first = rng.uniform_int(0, 30);
      const std::int64_t last = first + rng.uniform_int(40, 220);
      std::vector<std::pair<std::int64_t, ManeuverClass>> events;
      const int nev = static_cast<int>(rng.uniform_int(0, 2));
      for (int e = 0; e < nev; ++e) {
        const std::int64_t f = rng.uniform_int(first, last);
        events.emplace_back(f, rng.uniform(0, 1) < 0.5 ? ManeuverClass::LLC
                                                       : ManeuverClass::RLC);
      }
      std::sort(events.begin(), events.end());
      events.erase(std::unique(events.begin(), events.end(),
                               [](auto& a, auto& b) { return a.first == b.first; }),
                   events.end());
      VehicleTrack t = make_track(trial, first, last, events);
      WindowSpec spec;
      spec.horizon = static_cast<int>(rng.uniform_int(10, 40));
      spec.tte = static_cast<int>(rng.uniform_int(0, 2)) * 10;
      spec.guard = 10;
      const std::int64_t stride = rng.uniform_int(1, 25);

      auto got = enumerate_windows({t}, spec, stride);
      auto expected = oracle_enumerate(t, spec, stride);
      REQUIRE(got.size() == expected.size());
      std::set<std::pair<std::int64_t, int>> got_set, exp_set;
      for (const auto& w : got) got_set.insert({w.end_frame, static_cast<int>(w.label)});
      for (const auto& w : expected) exp_set.insert({w.end, w.label});
      CHECK(got_set == exp_set);
      // every emitted positive ends exactly tte frames before its event,
      // and label_window agrees on every emitted window
      for (const auto& w : got) {
        auto relabel = label_window(t, w.end_frame, spec);
        REQUIRE(relabel.has_value());
        CHECK(*relabel == w.label);
      }
    }
  }
}

TEST_CASE("train/validation split is by track") {
  SECTION("no track appears on both sides, proportions near the target") {
    Rng rng(5);
    std::vector<WindowRef> windows;
    for (int track = 0; track < 100; ++track) {
      const int count = static_cast<int>(rng.uniform_int(5, 15));
      for (int i = 0; i < count; ++i) {
        WindowRef w;
        w.clip_id = "clip" + std::to_string(track);
        w.track_id = track;
        w.end_frame = i;
        windows.push_back(w);
      }
    }
    SplitResult split = split_train_val(windows, 0.85, 42);
    CHECK_FALSE(split.single_track_warning);
    std::set<std::string> train_tracks, val_tracks;
    for (std::size_t i : split.train) train_tracks.insert(windows[i].clip_id);
    for (std::size_t i : split.val) val_tracks.insert(windows[i].clip_id);
    for (const auto& k : train_tracks) CHECK(val_tracks.count(k) == 0);
    const double frac =
        static_cast<double>(split.train.size()) / static_cast<double>(windows.size());
    CHECK(frac > 0.83);
    CHECK(frac < 0.88);
    CHECK(split.train.size() + split.val.size() == windows.size());
  }
  SECTION("same seed gives identical splits") {
    std::vector<WindowRef> windows;
    for (int track = 0; track < 20; ++track) {
      WindowRef w;
      w.clip_id = "c" + std::to_string(track);
      w.track_id = track;
      windows.push_back(w);
    }
    SplitResult a = split_train_val(windows, 0.85, 7);
    SplitResult b = split_train_val(windows, 0.85, 7);
    CHECK(a.train == b.train);
    CHECK(a.val == b.val);
  }
  SECTION("single track goes to train with a warning") {
    std::vector<WindowRef> windows(5);
    for (auto& w : windows) {
      w.clip_id = "only";
      w.track_id = 1;
    }
    SplitResult split = split_train_val(windows, 0.85, 1);
    CHECK(split.single_track_warning);
    CHECK(split.train.size() == 5);
    CHECK(split.val.empty());
  }
  SECTION("empty input is a contract error") {
    std::vector<WindowRef> windows;
    CHECK_THROWS_AS(split_train_val(windows, 0.85, 1), ContractError);
  }
}

TEST_CASE("balanced batch sampling") {
  SECTION("weights follow inverse class frequency") {
    std::vector<ManeuverClass> labels;
    for (int i = 0; i < 3110; ++i) labels.push_back(ManeuverClass::NLC);
    for (int i = 0; i < 342; ++i) labels.push_back(ManeuverClass::LLC);
    for (int i = 0; i < 438; ++i) labels.push_back(ManeuverClass::RLC);
    BalancedBatchSampler sampler(labels, 16, 1);
    const auto& w = sampler.class_weights();
    const double base = w[0] * 3110.0;
    CHECK_THAT(w[1] * 342.0, Catch::Matchers::WithinRel(base, 1e-12));
    CHECK_THAT(w[2] * 438.0, Catch::Matchers::WithinRel(base, 1e-12));
  }
  SECTION("equal counts sample uniformly") {
    std::vector<ManeuverClass> labels;
    for (int i = 0; i < 50; ++i) {
      labels.push_back(ManeuverClass::NLC);
      labels.push_back(ManeuverClass::LLC);
      labels.push_back(ManeuverClass::RLC);
    }
    BalancedBatchSampler sampler(labels, 16, 2);
    const auto& w = sampler.class_weights();
    for (double v : w) CHECK_THAT(v, Catch::Matchers::WithinAbs(1.0 / 3.0, 1e-12));
  }
  SECTION("ten thousand draws land near uniform class shares") {
    std::vector<ManeuverClass> labels;
    for (int i = 0; i < 500; ++i) labels.push_back(ManeuverClass::NLC);
    for (int i = 0; i < 60; ++i) labels.push_back(ManeuverClass::LLC);
    for (int i = 0; i < 90; ++i) labels.push_back(ManeuverClass::RLC);
    BalancedBatchSampler sampler(labels, 16, 99);
    std::array<int, 3> counts{};
    for (int i = 0; i < 10000; ++i) counts[static_cast<int>(labels[sampler.draw()])]++;
    for (int c = 0; c < 3; ++c) {
      const double share = counts[c] / 10000.0;
      CHECK(share > 0.283);
      CHECK(share < 0.383);
    }
  }
  SECTION("zero-sample class names the class") {
    std::vector<ManeuverClass> labels{ManeuverClass::NLC, ManeuverClass::NLC,
                                      ManeuverClass::RLC};
    CHECK_THROWS_WITH(BalancedBatchSampler(labels, 16, 1),
                      Catch::Matchers::ContainsSubstring("LLC"));
  }
  SECTION("batch size below three is rejected") {
    std::vector<ManeuverClass> labels{ManeuverClass::NLC, ManeuverClass::LLC,
                                      ManeuverClass::RLC};
    CHECK_THROWS_AS(BalancedBatchSampler(labels, 2, 1), ConfigError);
  }
}

TEST_CASE("synthetic clip generation") {
  SECTION("NLC keeps the lateral position within a pixel") {
    SynthClip clip = synthesize_clip(ManeuverClass::NLC, 70, 11);
    CHECK(clip.track.events.empty());
    double first_cx = 0.0;
    for (std::size_t i = 0; i < clip.track.frames.size(); ++i) {
      const auto& v = clip.track.frames[i].second.vertices;
      const double cx = 0.5 * (v[0][0] + v[1][0]);
      if (i == 0) first_cx = cx;
      CHECK(std::abs(cx - first_cx) <= 1.0);
    }
  }
  SECTION("LLC crosses the marking at the declared event frame") {
    for (std::uint64_t seed : {1ull, 22ull, 333ull}) {
      SynthClip clip = synthesize_clip(ManeuverClass::LLC, 80, seed);
      REQUIRE(clip.track.events.size() == 1);
      CHECK(clip.track.events[0].second == ManeuverClass::LLC);
      const std::int64_t ev = clip.track.events[0].first;
      const auto& v = clip.track.frames[static_cast<std::size_t>(ev)].second.vertices;
      const double bottom_cx = 0.5 * (v[2][0] + v[3][0]);
      // marking between start lane and the left lane at width 192
      const double margin = 192.0 / 16.0;
      const double marking = margin + (192.0 - 2 * margin) / 3.0;
      CHECK(std::abs(bottom_cx - marking) <= 1.0);
      // geometric re-check: the crossing really happens around ev
      const auto& before = clip.track.frames[static_cast<std::size_t>(ev - 2)].second.vertices;
      const auto& after = clip.track.frames[static_cast<std::size_t>(ev + 2)].second.vertices;
      const double cx_before = 0.5 * (before[2][0] + before[3][0]);
      const double cx_after = 0.5 * (after[2][0] + after[3][0]);
      CHECK((cx_before - marking) * (cx_after - marking) < 0.0);
    }
  }
  SECTION("RLC mirrors to the right lane") {
    SynthClip clip = synthesize_clip(ManeuverClass::RLC, 80, 5);
    REQUIRE(clip.track.events.size() == 1);
    CHECK(clip.track.events[0].second == ManeuverClass::RLC);
  }
  SECTION("same seed renders identical pixels") {
    SynthClip a = synthesize_clip(ManeuverClass::LLC, 64, 77);
    SynthClip b = synthesize_clip(ManeuverClass::LLC, 64, 77);
    REQUIRE(a.frames.size() == b.frames.size());
    for (std::size_t f = 0; f < a.frames.size(); ++f) {
      const auto av = a.frames[f].data();
      const auto bv = b.frames[f].data();
      REQUIRE(av.size() == bv.size());
      bool identical = true;
      for (std::size_t i = 0; i < av.size(); ++i) {
        if (av[i] != bv[i]) identical = false;
      }
      REQUIRE(identical);
    }
  }
  SECTION("length below sixty is rejected") {
    CHECK_THROWS_AS(synthesize_clip(ManeuverClass::NLC, 59, 1), ContractError);
  }
}

TEST_CASE("annotation round trip and validation") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "lanecast_annotations";
  fs::remove_all(dir);

  SECTION("golden two-track file") {
    const fs::path clip = dir / "clip_a";
    fs::create_directories(clip);
    {
      std::ofstream contours(clip / "contours.csv");
      contours << "track_id,frame,xs,ys\n";
      for (int f = 0; f <= 30; ++f) {
        contours << "1," << f << ",10;20;20;10,5;5;12;12\n";
      }
      for (int f = 10; f <= 50; ++f) {
        contours << "2," << f << ",40;60;60;40,8;8;20;20\n";
      }
      std::ofstream events(clip / "events.csv");
      events << "track_id,frame,class\n";
      events << "1,25,LLC\n";
      events << "2,33,RLC\n";
    }
    auto result = load_annotations(clip.string());
    REQUIRE(result.tracks.size() == 2);
    CHECK(result.warnings.empty());
    const auto& t1 = result.tracks[0];
    CHECK(t1.track_id == 1);
    CHECK(t1.frames.size() == 31);
    REQUIRE(t1.events.size() == 1);
    CHECK(t1.events[0] == std::make_pair<std::int64_t>(25, ManeuverClass::LLC));
    const auto& t2 = result.tracks[1];
    CHECK(t2.first_frame() == 10);
    CHECK(t2.last_frame() == 50);
    REQUIRE(t2.events.size() == 1);
    CHECK(t2.events[0].second == ManeuverClass::RLC);
  }
  SECTION("write then load is the identity on structure") {
    VehicleTrack t = make_track(9, 3, 80, {{44, ManeuverClass::RLC}}, "clip_b");
    write_annotations((dir / "clip_b").string(), {t});
    auto result = load_annotations((dir / "clip_b").string());
    REQUIRE(result.tracks.size() == 1);
    CHECK(result.tracks[0].track_id == 9);
    CHECK(result.tracks[0].frames.size() == t.frames.size());
    REQUIRE(result.tracks[0].events.size() == 1);
    CHECK(result.tracks[0].events[0].first == 44);
  }
  SECTION("event outside the track range names the track") {
    const fs::path clip = dir / "clip_bad";
    fs::create_directories(clip);
    {
      std::ofstream contours(clip / "contours.csv");
      contours << "track_id,frame,xs,ys\n";
      contours << "5,0,0;4;4;0,0;0;4;4\n";
      contours << "5,1,0;4;4;0,0;0;4;4\n";
      std::ofstream events(clip / "events.csv");
      events << "track_id,frame,class\n";
      events << "5,99,LLC\n";
    }
    CHECK_THROWS_WITH(load_annotations(clip.string()),
                      Catch::Matchers::ContainsSubstring("5"));
  }
  SECTION("malformed row reports the line number") {
    const fs::path clip = dir / "clip_malformed";
    fs::create_directories(clip);
    {
      std::ofstream contours(clip / "contours.csv");
      contours << "track_id,frame,xs,ys\n";
      contours << "1,0,1;2;3,4;5;6\n";
      contours << "1,1,not_a_number;2;3,4;5;6\n";
    }
    CHECK_THROWS_WITH(load_annotations(clip.string()),
                      Catch::Matchers::ContainsSubstring(":3"));
  }
  SECTION("empty file returns an empty list with a warning") {
    const fs::path clip = dir / "clip_empty";
    fs::create_directories(clip);
    {
      std::ofstream contours(clip / "contours.csv");
      contours << "track_id,frame,xs,ys\n";
    }
    auto result = load_annotations(clip.string());
    CHECK(result.tracks.empty());
    CHECK_FALSE(result.warnings.empty());
  }
  fs::remove_all(dir);
}

TEST_CASE("sample materialization from a synthetic clip") {
  SynthClip clip = synthesize_clip(ManeuverClass::LLC, 80, 404);
  clip.track.clip_id = "clip0";
  std::map<std::string, SyntheticFrameSource::ClipSpec> specs{
      {"clip0", {ManeuverClass::LLC, 80, 404}}};
  SyntheticFrameSource source(specs);

  WindowSpec wspec{20, 0, 10};
  RoiSpec roi{2, 112};
  FlowStackConfig flow_cfg;
  flow_cfg.fields = 10;

  auto windows = enumerate_windows({clip.track}, wspec, 20);
  REQUIRE_FALSE(windows.empty());
  const WindowRef* positive = nullptr;
  for (const auto& w : windows) {
    if (w.label == ManeuverClass::LLC) positive = &w;
  }
  REQUIRE(positive != nullptr);
  CHECK(positive->end_frame == clip.track.events[0].first);

  SampleWindow sample =
      materialize_window(source, clip.track, *positive, wspec, roi, flow_cfg);
  CHECK(sample.appearance.size() == 20);
  for (const auto& frame : sample.appearance) {
    REQUIRE(frame.shape() == Shape{3, 112, 112});
  }
  REQUIRE(sample.flow_stack.shape() == Shape{20, 112, 112});
  CHECK(sample.label == ManeuverClass::LLC);
  // flow channels are bounded by construction
  for (float v : sample.flow_stack.data()) {
    REQUIRE(v >= -1.0f);
    REQUIRE(v <= 1.0f);
  }
}

TEST_CASE("uniform index subsampling") {
  auto idx = uniform_indices(10, 19);
  REQUIRE(idx.size() == 10);
  CHECK(idx.front() == 0);
  CHECK(idx.back() == 18);
  for (std::size_t i = 1; i < idx.size(); ++i) CHECK(idx[i] >= idx[i - 1]);
  auto five = uniform_indices(5, 20);
  CHECK(five == std::vector<std::size_t>{0, 5, 10, 14, 19});
}

TEST_CASE("dataset statistics per class") {
  std::vector<VehicleTrack> tracks;
  tracks.push_back(make_track(1, 0, 49, {}));                                  // NLC, 50 frames
  tracks.push_back(make_track(2, 0, 99, {{50, ManeuverClass::LLC}}));          // LLC, 100
  tracks.push_back(make_track(3, 0, 79, {{40, ManeuverClass::RLC}}));          // RLC, 80
  tracks.push_back(make_track(4, 0, 59, {}));                                  // NLC, 60
  DatasetStats stats = dataset_stats(tracks);
  CHECK(stats.sequences[0] == 2);
  CHECK(stats.sequences[1] == 1);
  CHECK(stats.sequences[2] == 1);
  CHECK_THAT(stats.avg_frames[0], Catch::Matchers::WithinAbs(55.0, 1e-9));
  CHECK_THAT(stats.avg_frames[1], Catch::Matchers::WithinAbs(100.0, 1e-9));
  CHECK_THAT(stats.avg_frames[2], Catch::Matchers::WithinAbs(80.0, 1e-9));
}
