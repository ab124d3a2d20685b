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

#include "lanecast/grid.hpp"

using namespace lanecast;

namespace {

// Small synthetic universe shared by the harness tests.
struct TinyWorld {
  std::vector<VehicleTrack> tracks;
  std::map<std::string, SyntheticFrameSource::ClipSpec> specs;
  std::unique_ptr<SyntheticFrameSource> source;

  explicit TinyWorld(int clips_per_class, int length = 64, std::uint64_t seed = 900) {
    const ManeuverClass classes[3] = {ManeuverClass::NLC, ManeuverClass::LLC,
                                      ManeuverClass::RLC};
    int i = 0;
    for (ManeuverClass cls : classes) {
      for (int k = 0; k < clips_per_class; ++k, ++i) {
        const std::string id = "clip_" + std::to_string(i);
        const std::uint64_t clip_seed = hash_combine(seed, static_cast<std::uint64_t>(i));
        specs.emplace(id, SyntheticFrameSource::ClipSpec{cls, length, clip_seed});
        SynthClip clip = synthesize_clip(cls, length, clip_seed, 128, 96);
        clip.track.clip_id = id;
        clip.track.track_id = i;
        tracks.push_back(std::move(clip.track));
      }
    }
    source = std::make_unique<SyntheticFrameSource>(specs, 128, 96);
  }

  MaterializedDataset materialize(const WindowSpec& spec, const RoiSpec& roi,
                                  const FlowStackConfig& flow_cfg, int frames,
                                  std::int64_t stride = 20) {
    auto windows = enumerate_windows(tracks, spec, stride);
    return MaterializedDataset::build(*source, tracks, windows, spec, roi, flow_cfg, frames);
  }
};

ModelConfig tiny_disjoint() {
  ModelConfig cfg;
  cfg.kind = ModelKind::Disjoint;
  cfg.disjoint.input_size = 64;
  cfg.disjoint.flow_fields = 5;
  cfg.disjoint.conv_channels = {8, 12, 16, 16, 16};
  cfg.disjoint.fc_sizes = {64, 32};
  return cfg;
}

ModelConfig tiny_st() {
  ModelConfig cfg;
  cfg.kind = ModelKind::StMultiplier;
  cfg.st.input_size = 64;
  cfg.st.frames = 5;
  cfg.st.flow_fields = 5;
  cfg.st.stem_channels = 6;
  cfg.st.stage_channels = {6, 8, 12, 16};
  cfg.st.stage_blocks = {2, 2, 2, 2};
  return cfg;
}

FlowStackConfig tiny_flow(int fields) {
  FlowStackConfig cfg;
  cfg.fields = fields;
  return cfg;
}

}  // namespace

TEST_CASE("metrics accuracy identity") {
  MetricsReport r;
  r.confusion = {{{5, 1, 0}, {1, 3, 1}, {0, 0, 2}}};
  r.finalize();
  CHECK(r.total() == 13);
  CHECK(r.trace() == 10);
  CHECK_THAT(r.accuracy, Catch::Matchers::WithinAbs(10.0 / 13.0, 1e-12));

  SECTION("diagonal 5,3,2 of 12 gives 83.33 percent") {
    MetricsReport d;
    d.confusion = {{{5, 0, 1}, {0, 3, 0}, {1, 0, 2}}};
    d.finalize();
    CHECK_THAT(100.0 * d.accuracy, Catch::Matchers::WithinAbs(83.33, 0.01));
  }
  SECTION("perfect predictions give 100 percent and empty off-diagonal") {
    MetricsReport p;
    p.confusion = {{{4, 0, 0}, {0, 4, 0}, {0, 0, 4}}};
    p.finalize();
    CHECK(p.accuracy == 1.0);
  }
  SECTION("json round trip") {
    const nlohmann::json j = metrics_to_json(r);
    MetricsReport back = metrics_from_json(j);
    CHECK(back.confusion == r.confusion);
    CHECK(back.accuracy == r.accuracy);
  }
}

TEST_CASE("evaluation against a hand tally", "[harness]") {
  TinyWorld world(2);
  WindowSpec spec{20, 0, 10};
  RoiSpec roi{2, 64};
  MaterializedDataset ds = world.materialize(spec, roi, tiny_flow(5), 5);
  REQUIRE(ds.size() >= 6);

  ModelConfig cfg = tiny_disjoint();
  TrainableModel model(cfg, 42);

  // hand tally: run the model sample by sample and count
  MetricsReport expected;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Tensor<float> probs = model.eval_probs(ds, {i});
    const auto pred = predict(probs)[0];
    expected.confusion[static_cast<int>(ds.entry(i).label)][static_cast<int>(pred)] += 1;
  }
  expected.finalize();

  MetricsReport got = evaluate_model(model, ds, 0);
  CHECK(got.confusion == expected.confusion);
  CHECK(got.accuracy == expected.accuracy);
  CHECK(got.total() == static_cast<std::int64_t>(ds.size()));

  SECTION("empty validation set is a contract error") {
    MaterializedDataset empty = ds.subset({});
    CHECK_THROWS_AS(evaluate_model(model, empty, 0), ContractError);
  }
}

TEST_CASE("training is deterministic and keeps the best checkpoint", "[harness]") {
  TinyWorld world(2);
  WindowSpec spec{20, 0, 10};
  RoiSpec roi{2, 64};
  MaterializedDataset all = world.materialize(spec, roi, tiny_flow(5), 5);
  auto labels = all.labels();
  // split by parity for a quick train/val pair
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < all.size(); ++i) {
    (i % 3 == 0 ? val_idx : train_idx).push_back(i);
  }
  MaterializedDataset train_set = all.subset(train_idx);
  MaterializedDataset val_set = all.subset(val_idx);

  TrainBudget budget;
  budget.epochs = 2;
  budget.batch_size = 4;
  budget.learning_rate = 0.005;
  budget.early_stop_patience = 0;

  auto run = [&] { return train(tiny_disjoint(), train_set, val_set, budget, 77); };
  TrainResult a = run();
  TrainResult b = run();
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].mean_loss == b.log[i].mean_loss);
    CHECK(a.log[i].val_accuracy == b.log[i].val_accuracy);
  }
  REQUIRE(a.best_checkpoint.size() == b.best_checkpoint.size());
  for (std::size_t i = 0; i < a.best_checkpoint.size(); ++i) {
    const auto& ta = a.best_checkpoint[i].tensor;
    const auto& tb = b.best_checkpoint[i].tensor;
    REQUIRE(ta.size() == tb.size());
    for (std::size_t j = 0; j < ta.size(); ++j) REQUIRE(ta.data()[j] == tb.data()[j]);
  }
}

TEST_CASE("zero-epoch budget yields an untrained model at chance level", "[harness]") {
  TinyWorld world(3);
  WindowSpec spec{20, 0, 10};
  RoiSpec roi{2, 64};
  MaterializedDataset all = world.materialize(spec, roi, tiny_flow(5), 5);
  MaterializedDataset balanced = all.subset(balance_classes(all.labels(), 5));
  REQUIRE(balanced.size() >= 9);

  TrainBudget budget;
  budget.epochs = 0;
  TrainResult result = train(tiny_disjoint(), balanced, balanced, budget, 3);
  CHECK(result.best_epoch == 0);
  CHECK(result.log.empty());
  CHECK(result.best_report.accuracy > 0.33 - 0.10);
  CHECK(result.best_report.accuracy < 0.33 + 0.10);
}

TEST_CASE("eight-sample overfit canary", "[harness][canary]") {
  TinyWorld world(2);
  WindowSpec spec{20, 0, 10};
  RoiSpec roi{2, 64};
  MaterializedDataset all = world.materialize(spec, roi, tiny_flow(5), 5);
  REQUIRE(all.size() >= 8);
  std::vector<std::size_t> first8;
  // mix classes: take positives first, then NLC
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < all.size(); ++i) {
    (all.entry(i).label == ManeuverClass::NLC ? neg : pos).push_back(i);
  }
  for (std::size_t i : pos) {
    if (first8.size() < 5) first8.push_back(i);
  }
  for (std::size_t i : neg) {
    if (first8.size() < 8) first8.push_back(i);
  }
  MaterializedDataset batch8 = all.subset(first8);
  std::vector<std::size_t> all_idx(batch8.size());
  for (std::size_t i = 0; i < all_idx.size(); ++i) all_idx[i] = i;

  auto overfit = [&](const ModelConfig& cfg, double lr) {
    TrainableModel model(cfg, 11);
    OptimizerState<float> opt(model.registry().trainable_params(), static_cast<float>(lr),
                              0.9f);
    double loss_value = 1e9;
    for (int step = 0; step < 500 && loss_value >= 0.05; ++step) {
      Tensor<float> loss = model.train_loss(batch8, all_idx);
      loss_value = loss.item();
      loss.backward();
      opt.step();
    }
    return loss_value;
  };
  CHECK(overfit(tiny_disjoint(), 0.01) < 0.05);
  CHECK(overfit(tiny_st(), 0.01) < 0.05);
}

TEST_CASE("report rendering", "[harness]") {
  auto make_cell = [](ModelKind m, int h, int t, int s, double acc, bool failed = false) {
    CellResult c;
    c.key = {m, h, t, s, 1};
    c.failed = failed;
    if (!failed) {
      const std::int64_t correct = std::llround(acc * 10000);
      c.report.confusion[0][0] = correct;
      c.report.confusion[1][0] = 10000 - correct;
      c.report.finalize();
    }
    return c;
  };

  SECTION("two decimals, em dash for failures, markdown equivalence") {
    std::vector<CellResult> cells;
    cells.push_back(make_cell(ModelKind::StMultiplier, 40, 0, 3, 0.9030));
    cells.push_back(make_cell(ModelKind::StMultiplier, 40, 0, 1, 0.0, true));
    ReportTables tables = emit_tables(cells, {ModelKind::StMultiplier}, {40}, {0}, {1, 3});
    REQUIRE(tables.classification_rows.size() == 2);
    CHECK(tables.classification_rows[0] == "method,horizon,x1,x3");
    CHECK(tables.classification_rows[1] ==
          std::string("st-multiplier,40,") + "\u2014" + ",90.30");
    const std::string md = csv_to_markdown(tables.classification_csv());
    CHECK_THAT(md, Catch::Matchers::ContainsSubstring("90.30"));
    CHECK_THAT(md, Catch::Matchers::ContainsSubstring("\u2014"));
  }
  SECTION("multiple seeds render mean and sigma") {
    std::vector<CellResult> cells;
    auto a = make_cell(ModelKind::Disjoint, 20, 0, 2, 0.84);
    auto b = make_cell(ModelKind::Disjoint, 20, 0, 2, 0.86);
    b.key.seed = 2;
    cells.push_back(a);
    cells.push_back(b);
    ReportTables tables = emit_tables(cells, {ModelKind::Disjoint}, {20}, {0}, {2});
    REQUIRE(tables.classification_rows.size() == 2);
    CHECK(tables.classification_rows[1] == std::string("disjoint,20,85.00") + "\u00b1" + "1.00");
  }
  SECTION("accuracy identity violations are rejected") {
    CellResult bad = make_cell(ModelKind::Disjoint, 20, 0, 2, 0.84);
    bad.report.accuracy = 0.5;  // break the identity
    CHECK_THROWS_AS(emit_tables({bad}, {ModelKind::Disjoint}, {20}, {0}, {2}),
                    ValidationError);
  }
}

TEST_CASE("grid structure, resumability, failed cells", "[harness][grid]") {
  namespace fs = std::filesystem;
  const fs::path outdir = fs::temp_directory_path() / "lanecast_grid_test";
  fs::remove_all(outdir);

  TinyWorld world(2);
  ExperimentGrid grid;
  grid.methods = {ModelKind::Disjoint, ModelKind::StMultiplier};
  grid.horizons = {20, 200};  // 200 cannot produce windows from 64-frame clips
  grid.ttes = {0};
  grid.roi_scales = {1, 2};
  grid.seeds = {1};
  grid.budget.epochs = 0;  // evaluation-only cells keep this test fast
  grid.train_fraction = 0.7;
  grid.window_stride = 20;
  grid.roi_output_size = 64;
  grid.disjoint_cfg = tiny_disjoint();
  grid.st_cfg = tiny_st();
  grid.flow_cfg = tiny_flow(5);

  auto results = run_grid(grid, world.tracks, *world.source, outdir.string(), 9);
  REQUIRE(results.size() == 2 * 2 * 1 * 2);

  int failed = 0, ok = 0;
  for (const auto& c : results) {
    if (c.failed) {
      ++failed;
      CHECK(c.key.horizon == 200);
    } else {
      ++ok;
      CHECK(c.report.total() > 0);
    }
  }
  CHECK(failed == 4);  // both methods, both scales at horizon 200
  CHECK(ok == 4);

  ReportTables tables =
      emit_tables(results, grid.methods, grid.horizons, grid.ttes, grid.roi_scales);
  REQUIRE(tables.classification_rows.size() == 1 + 4);  // header + 2 methods x 2 horizons
  CHECK(tables.classification_rows[0] == "method,horizon,x1,x2");
  for (std::size_t i = 1; i < tables.classification_rows.size(); ++i) {
    const std::string& row = tables.classification_rows[i];
    if (row.find("200") != std::string::npos) {
      CHECK_THAT(row, Catch::Matchers::ContainsSubstring("\u2014"));
    }
  }

  SECTION("second run reuses every cell and reproduces the tables") {
    auto again = run_grid(grid, world.tracks, *world.source, outdir.string(), 9);
    REQUIRE(again.size() == results.size());
    for (const auto& c : again) CHECK(c.from_cache);
    ReportTables tables2 =
        emit_tables(again, grid.methods, grid.horizons, grid.ttes, grid.roi_scales);
    CHECK(tables2.classification_csv() == tables.classification_csv());
  }
  fs::remove_all(outdir);
}
