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

// lanecast: synthetic lane-change clips, dense optical flow, ROI tooling,
// training, evaluation, and the experiment grid, from one binary.

#include <CLI11.hpp>

#include <iostream>

#include "lanecast/grid.hpp"

namespace fs = std::filesystem;
using namespace lanecast;

namespace {

std::string default_out_dir() {
  if (const char* env = std::getenv("LANECAST_OUT_DIR")) return env;
  return "out";
}

nlohmann::json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

FlowParams flow_params_from_json(const nlohmann::json& j) {
  FlowParams p;
  p.levels = j.value("levels", p.levels);
  p.window_radius = j.value("window_radius", p.window_radius);
  p.sigma = j.value("sigma", p.sigma);
  p.iterations = j.value("iterations", p.iterations);
  p.aggregation_radius = j.value("aggregation_radius", p.aggregation_radius);
  return p;
}

FlowStackConfig flow_stack_from_json(const nlohmann::json& j) {
  FlowStackConfig cfg;
  cfg.fields = j.value("fields", cfg.fields);
  cfg.clamp = j.value("clamp", cfg.clamp);
  cfg.flow = flow_params_from_json(j);
  return cfg;
}

TrainBudget budget_from_json(const nlohmann::json& j) {
  TrainBudget b;
  b.epochs = j.value("epochs", b.epochs);
  b.batch_size = j.value("batch_size", b.batch_size);
  b.learning_rate = j.value("learning_rate", b.learning_rate);
  b.momentum = j.value("momentum", b.momentum);
  b.lr_decay = j.value("lr_decay", b.lr_decay);
  b.lr_decay_at = j.value("lr_decay_at", b.lr_decay_at);
  b.early_stop_patience = j.value("early_stop_patience", b.early_stop_patience);
  b.early_stop_target = j.value("early_stop_target", b.early_stop_target);
  return b;
}

// All clip directories under a dataset root, with their tracks.
std::vector<VehicleTrack> load_dataset_tracks(const std::string& root,
                                              std::vector<std::string>* warnings = nullptr) {
  std::vector<VehicleTrack> tracks;
  std::vector<fs::path> clip_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "contours.csv")) {
      clip_dirs.push_back(entry.path());
    }
  }
  std::sort(clip_dirs.begin(), clip_dirs.end());
  if (clip_dirs.empty()) throw IoError("no clip directories with contours.csv under " + root);
  for (const auto& dir : clip_dirs) {
    AnnotationLoadResult result = load_annotations(dir.string());
    for (auto& t : result.tracks) tracks.push_back(std::move(t));
    if (warnings) {
      warnings->insert(warnings->end(), result.warnings.begin(), result.warnings.end());
    }
  }
  return tracks;
}

void print_report(const MetricsReport& r) {
  static const char* names[3] = {"NLC", "LLC", "RLC"};
  std::printf("confusion (rows = truth, cols = predicted):\n");
  std::printf("%8s %6s %6s %6s\n", "", "NLC", "LLC", "RLC");
  for (int t = 0; t < 3; ++t) {
    std::printf("%8s %6lld %6lld %6lld\n", names[t],
                static_cast<long long>(r.confusion[t][0]),
                static_cast<long long>(r.confusion[t][1]),
                static_cast<long long>(r.confusion[t][2]));
  }
  std::printf("samples: %lld   accuracy: %.2f%%   wall: %.1fs\n",
              static_cast<long long>(r.total()), 100.0 * r.accuracy, r.wall_clock_sec);
}

struct DatasetArgs {
  std::string data;
  int horizon = 20;
  int tte = 0;
  int guard = 10;
  int stride = 20;
  int scale = 2;
  int size = 112;
  double fraction = 0.85;
  bool no_balance_val = false;

  void attach(CLI::App* cmd, bool with_split = true) {
    cmd->add_option("--data", data, "dataset root of clip directories")->required();
    cmd->add_option("--horizon", horizon, "observation horizon N, frames");
    cmd->add_option("--tte", tte, "time to event, frames");
    cmd->add_option("--guard", guard, "NLC guard band, frames");
    cmd->add_option("--stride", stride, "NLC window stride, frames");
    cmd->add_option("--roi-scale", scale, "ROI context scale, 1..4");
    if (with_split) {
      cmd->add_option("--train-fraction", fraction, "train split fraction by track");
      cmd->add_flag("--no-balance-val", no_balance_val,
                    "evaluate on the raw validation split instead of a class-balanced subset");
    }
  }
};

struct PreparedData {
  MaterializedDataset train_set;
  MaterializedDataset val_set;
};

PreparedData prepare(const DatasetArgs& args, const FlowStackConfig& flow_cfg, int frames,
                     std::uint64_t seed) {
  std::vector<std::string> warnings;
  auto tracks = load_dataset_tracks(args.data, &warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  DirectoryFrameSource source(args.data);
  WindowSpec spec{args.horizon, args.tte, args.guard};
  RoiSpec roi{args.scale, args.size};
  auto windows = enumerate_windows(tracks, spec, args.stride);
  if (windows.empty()) throw ContractError("no labelable windows in " + args.data);
  auto split = split_train_val(windows, args.fraction, hash_combine(seed, std::string("split")));
  if (split.single_track_warning) {
    std::cerr << "warning: single track dataset, validation split is empty\n";
  }
  auto pick = [&](const std::vector<std::size_t>& idx) {
    std::vector<WindowRef> out;
    for (std::size_t i : idx) out.push_back(windows[i]);
    return out;
  };
  PreparedData data;
  data.train_set = MaterializedDataset::build(source, tracks, pick(split.train), spec, roi,
                                              flow_cfg, frames);
  data.val_set = MaterializedDataset::build(source, tracks, pick(split.val), spec, roi,
                                            flow_cfg, frames);
  if (!args.no_balance_val && !data.val_set.empty()) {
    const auto balanced =
        balance_classes(data.val_set.labels(), hash_combine(seed, std::string("balance")));
    if (!balanced.empty()) data.val_set = data.val_set.subset(balanced);
  }
  return data;
}

ExperimentGrid grid_from_json(const nlohmann::json& j) {
  ExperimentGrid grid;
  if (j.contains("methods")) {
    grid.methods.clear();
    for (const auto& m : j.at("methods")) {
      const std::string name = m.get<std::string>();
      if (name == "disjoint") {
        grid.methods.push_back(ModelKind::Disjoint);
      } else if (name == "st-multiplier") {
        grid.methods.push_back(ModelKind::StMultiplier);
      } else {
        throw ConfigError("grid config: unknown method '" + name + "'");
      }
    }
  }
  if (j.contains("horizons")) grid.horizons = j.at("horizons").get<std::vector<int>>();
  if (j.contains("ttes")) grid.ttes = j.at("ttes").get<std::vector<int>>();
  if (j.contains("roi_scales")) grid.roi_scales = j.at("roi_scales").get<std::vector<int>>();
  if (j.contains("seeds")) grid.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("budget")) grid.budget = budget_from_json(j.at("budget"));
  grid.train_fraction = j.value("train_fraction", grid.train_fraction);
  grid.balance_validation = j.value("balance_validation", grid.balance_validation);
  grid.window_stride = j.value("window_stride", grid.window_stride);
  grid.guard = j.value("guard", grid.guard);
  grid.roi_output_size = j.value("roi_output_size", grid.roi_output_size);
  if (j.contains("flow")) grid.flow_cfg = flow_stack_from_json(j.at("flow"));
  if (j.contains("disjoint")) {
    nlohmann::json d = j.at("disjoint");
    d["kind"] = "disjoint";
    grid.disjoint_cfg = model_config_from_json(d);
  }
  if (j.contains("st")) {
    nlohmann::json s = j.at("st");
    s["kind"] = "st-multiplier";
    grid.st_cfg = model_config_from_json(s);
  }
  return grid;
}

// Axes observed in cached cell files, for re-emitting reports.
struct ObservedAxes {
  std::vector<ModelKind> methods;
  std::vector<int> horizons, ttes, scales;
};

ObservedAxes collect_axes(const std::vector<CellResult>& cells) {
  ObservedAxes axes;
  std::set<int> h, t, s;
  std::set<std::string> m;
  for (const auto& c : cells) {
    m.insert(to_string(c.key.method));
    h.insert(c.key.horizon);
    t.insert(c.key.tte);
    s.insert(c.key.roi_scale);
  }
  if (m.count("disjoint")) axes.methods.push_back(ModelKind::Disjoint);
  if (m.count("st-multiplier")) axes.methods.push_back(ModelKind::StMultiplier);
  axes.horizons.assign(h.begin(), h.end());
  axes.ttes.assign(t.begin(), t.end());
  axes.scales.assign(s.begin(), s.end());
  return axes;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lane-change maneuver classification and prediction pipeline"};
  app.require_subcommand(1);
  app.fallthrough();  // global --seed/--out-dir may follow the subcommand

  std::uint64_t seed = 1;
  app.add_option("--seed", seed, "global seed")->capture_default_str();
  std::string out_dir = default_out_dir();
  app.add_option("--out-dir", out_dir,
                 "output directory (defaults to $LANECAST_OUT_DIR or ./out)");

  // --- synth ---------------------------------------------------------------
  auto* synth = app.add_subcommand("synth", "generate synthetic highway clips");
  int clips_per_class = 10;
  int length = 80;
  std::size_t synth_w = 192, synth_h = 144;
  bool fixed_length = false;
  synth->add_option("--clips-per-class", clips_per_class);
  synth->add_option("--length", length, "frames per clip");
  synth->add_option("--width", synth_w);
  synth->add_option("--height", synth_h);
  synth->add_flag("--fixed-length", fixed_length, "use --length exactly instead of a range");

  // --- flow ----------------------------------------------------------------
  auto* flowcmd = app.add_subcommand("flow", "dense optical flow between two images");
  std::string frame_a, frame_b, flow_out, flow_viz;
  FlowParams flow_params;
  flowcmd->add_option("--frame-a", frame_a, "first image (PNG or PGM)")->required();
  flowcmd->add_option("--frame-b", frame_b, "second image (PNG or PGM)")->required();
  flowcmd->add_option("--out", flow_out, "output flow file (LCFL)")->required();
  flowcmd->add_option("--viz", flow_viz, "optional color-coded PNG");
  flowcmd->add_option("--levels", flow_params.levels);
  flowcmd->add_option("--window-radius", flow_params.window_radius);
  flowcmd->add_option("--sigma", flow_params.sigma);
  flowcmd->add_option("--iterations", flow_params.iterations);
  flowcmd->add_option("--aggregation-radius", flow_params.aggregation_radius);

  // --- roi -----------------------------------------------------------------
  auto* roicmd = app.add_subcommand("roi", "dump a vehicle-centered crop as PNG");
  std::string roi_clip, roi_out;
  std::int64_t roi_track = 0, roi_frame = 0;
  int roi_scale = 2, roi_size = 112;
  roicmd->add_option("--clip", roi_clip, "clip directory")->required();
  roicmd->add_option("--track", roi_track, "track id")->required();
  roicmd->add_option("--frame", roi_frame, "frame index")->required();
  roicmd->add_option("--roi-scale", roi_scale, "context scale, 1..4");
  roicmd->add_option("--size", roi_size, "output resolution");
  roicmd->add_option("--out", roi_out, "output PNG")->required();

  // --- windows ---------------------------------------------------------------
  auto* windows_cmd = app.add_subcommand("windows", "dataset statistics and window counts");
  DatasetArgs windows_args;
  windows_args.attach(windows_cmd, false);

  // --- train -----------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "train one model");
  DatasetArgs train_args;
  train_args.attach(train_cmd);
  std::string train_model_config;
  std::string train_out;
  TrainBudget cli_budget;
  train_cmd->add_option("--config", train_model_config, "model config JSON")->required();
  train_cmd->add_option("--checkpoint-out", train_out, "checkpoint path");
  train_cmd->add_option("--epochs", cli_budget.epochs);
  train_cmd->add_option("--batch-size", cli_budget.batch_size);
  train_cmd->add_option("--learning-rate", cli_budget.learning_rate);
  train_cmd->add_option("--momentum", cli_budget.momentum);
  train_cmd->add_option("--patience", cli_budget.early_stop_patience);

  // --- eval ------------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  DatasetArgs eval_args;
  eval_args.attach(eval_cmd);
  std::string eval_model_config, eval_checkpoint;
  eval_cmd->add_option("--config", eval_model_config, "model config JSON")->required();
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint path")->required();

  // --- grid ------------------------------------------------------------------
  auto* grid_cmd = app.add_subcommand("grid", "run the experiment grid");
  std::string grid_config, grid_data;
  grid_cmd->add_option("--config", grid_config, "grid config JSON")->required();
  grid_cmd->add_option("--data", grid_data, "dataset root")->required();

  // --- report ----------------------------------------------------------------
  auto* report_cmd = app.add_subcommand("report", "emit tables from completed grid cells");
  std::string report_cells;
  std::string report_format = "csv";
  report_cmd->add_option("--cells", report_cells, "grid output directory (with cells/)");
  report_cmd->add_option("--format", report_format, "csv or markdown");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      fs::create_directories(out_dir);
      Rng rng(seed);
      const ManeuverClass classes[3] = {ManeuverClass::NLC, ManeuverClass::LLC,
                                        ManeuverClass::RLC};
      int index = 0;
      for (ManeuverClass cls : classes) {
        for (int k = 0; k < clips_per_class; ++k, ++index) {
          const int len =
              fixed_length ? length
                           : static_cast<int>(rng.uniform_int(std::max(60, length - 8),
                                                              length + 8));
          const std::uint64_t clip_seed = hash_combine(seed, static_cast<std::uint64_t>(index));
          SynthClip clip = synthesize_clip(cls, len, clip_seed, synth_w, synth_h);
          char name[64];
          std::snprintf(name, sizeof(name), "clip_%s_%03d", to_string(cls), k);
          clip.track.track_id = index;
          write_clip((fs::path(out_dir) / name).string(), clip);
          std::string note;
          if (!clip.track.events.empty()) {
            note = ", event at frame " + std::to_string(clip.track.events[0].first);
          }
          std::printf("%s: %d frames%s\n", name, len, note.c_str());
        }
      }
      return 0;
    }

    if (*flowcmd) {
      Tensor<float> a = read_image_gray(frame_a);
      Tensor<float> b = read_image_gray(frame_b);
      DenseFlowResult res = dense_flow(a, b, flow_params);
      write_flow_file(flow_out, res.flow);
      std::printf("flow %zux%zu written to %s (%zu singular pixels across passes)\n",
                  res.flow.width, res.flow.height, flow_out.c_str(),
                  res.stats.singular_pixels);
      if (!flow_viz.empty()) {
        write_png_rgb(flow_viz, flow_to_color(res.flow));
        std::printf("visualization written to %s\n", flow_viz.c_str());
      }
      return 0;
    }

    if (*roicmd) {
      auto loaded = load_annotations(roi_clip);
      const VehicleTrack* track = nullptr;
      for (const auto& t : loaded.tracks) {
        if (t.track_id == roi_track) track = &t;
      }
      if (!track) {
        throw ValidationError("no track " + std::to_string(roi_track) + " in " + roi_clip);
      }
      const std::ptrdiff_t pos = track->position_of(roi_frame);
      if (pos < 0) throw CoverageError("track has no frame " + std::to_string(roi_frame));
      DirectoryFrameSource source(fs::path(roi_clip).parent_path().string());
      Tensor<float> frame = source.frame(fs::path(roi_clip).filename().string(), roi_frame);
      RoiBox box = square_box(track->frames[pos].second, roi_scale);
      CropResult crop = crop_pad(frame, box);
      if (crop.fully_outside) std::cerr << "warning: box entirely outside the frame\n";
      Tensor<float> resized = resize_bilinear(crop.image, roi_size, roi_size);
      write_png_rgb(roi_out, resized);
      std::printf("crop center (%.1f, %.1f) side %.1f -> %s\n", box.cx, box.cy, box.side,
                  roi_out.c_str());
      return 0;
    }

    if (*windows_cmd) {
      auto tracks = load_dataset_tracks(windows_args.data);
      DatasetStats stats = dataset_stats(tracks);
      WindowSpec spec{windows_args.horizon, windows_args.tte, windows_args.guard};
      auto refs = enumerate_windows(tracks, spec, windows_args.stride);
      std::array<std::int64_t, 3> window_counts{};
      for (const auto& r : refs) window_counts[static_cast<int>(r.label)]++;
      std::printf("%20s %10s %10s %10s\n", "", "NLC", "LLC", "RLC");
      std::printf("%20s %10lld %10lld %10lld\n", "# of sequences",
                  static_cast<long long>(stats.sequences[0]),
                  static_cast<long long>(stats.sequences[1]),
                  static_cast<long long>(stats.sequences[2]));
      std::printf("%20s %10.1f %10.1f %10.1f\n", "avg. # of frames", stats.avg_frames[0],
                  stats.avg_frames[1], stats.avg_frames[2]);
      std::printf("%20s %10lld %10lld %10lld   (N=%d, TTE=%d, stride=%d)\n", "# of windows",
                  static_cast<long long>(window_counts[0]),
                  static_cast<long long>(window_counts[1]),
                  static_cast<long long>(window_counts[2]), windows_args.horizon,
                  windows_args.tte, windows_args.stride);
      return 0;
    }

    if (*train_cmd) {
      nlohmann::json mj = load_json(train_model_config);
      ModelConfig cfg = model_config_from_json(mj);
      FlowStackConfig flow_cfg;
      flow_cfg.fields = cfg.flow_fields();
      train_args.size = cfg.input_size();
      PreparedData data = prepare(train_args, flow_cfg, cfg.appearance_frames(), seed);
      std::printf("train %zu samples, val %zu samples\n", data.train_set.size(),
                  data.val_set.size());
      TrainResult result = train(cfg, data.train_set, data.val_set, cli_budget, seed);
      for (const auto& e : result.log) {
        std::printf("epoch %3d  loss %.4f  val %.2f%%\n", e.epoch, e.mean_loss,
                    100.0 * e.val_accuracy);
      }
      fs::create_directories(out_dir);
      const std::string ckpt =
          train_out.empty() ? (fs::path(out_dir) / "model.ckpt").string() : train_out;
      save_checkpoint(ckpt, result.best_checkpoint);
      std::ofstream log(fs::path(out_dir) / "train_log.csv");
      log << "epoch,loss,val_accuracy\n";
      for (const auto& e : result.log) {
        log << e.epoch << "," << e.mean_loss << "," << e.val_accuracy << "\n";
      }
      std::printf("best epoch %d, val %.2f%%, checkpoint %s\n", result.best_epoch,
                  100.0 * result.best_report.accuracy, ckpt.c_str());
      print_report(result.best_report);
      return 0;
    }

    if (*eval_cmd) {
      nlohmann::json mj = load_json(eval_model_config);
      ModelConfig cfg = model_config_from_json(mj);
      FlowStackConfig flow_cfg;
      flow_cfg.fields = cfg.flow_fields();
      eval_args.size = cfg.input_size();
      PreparedData data = prepare(eval_args, flow_cfg, cfg.appearance_frames(), seed);
      if (data.val_set.empty()) throw ContractError("validation split is empty");
      MetricsReport report = evaluate_checkpoint(cfg, eval_checkpoint, data.val_set);
      print_report(report);
      return 0;
    }

    if (*grid_cmd) {
      ExperimentGrid grid = grid_from_json(load_json(grid_config));
      grid.validate();
      auto tracks = load_dataset_tracks(grid_data);
      DirectoryFrameSource source(grid_data);
      fs::create_directories(out_dir);
      auto results = run_grid(grid, tracks, source, out_dir, seed);
      emit_report(results, grid, out_dir, "csv");
      emit_report(results, grid, out_dir, "markdown");
      int failed = 0;
      for (const auto& c : results) {
        if (c.failed) {
          std::printf("%-36s FAILED: %s\n", c.key.id().c_str(), c.error.c_str());
          ++failed;
        } else {
          std::printf("%-36s %.2f%%%s\n", c.key.id().c_str(), 100.0 * c.report.accuracy,
                      c.from_cache ? " (cached)" : "");
        }
      }
      std::printf("%zu cells, %d failed; reports under %s\n", results.size(), failed,
                  out_dir.c_str());
      return failed == 0 ? 0 : 1;
    }

    if (*report_cmd) {
      const std::string cells_dir = report_cells.empty() ? out_dir : report_cells;
      const fs::path dir = fs::path(cells_dir) / "cells";
      if (!fs::exists(dir)) throw IoError("no cells directory under " + cells_dir);
      std::vector<fs::path> files;
      for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.path().extension() == ".json") files.push_back(entry.path());
      }
      std::sort(files.begin(), files.end());
      std::vector<CellResult> cells;
      for (const auto& f : files) {
        std::ifstream in(f);
        cells.push_back(cell_from_json(nlohmann::json::parse(in)));
      }
      if (cells.empty()) throw ContractError("no completed cells in " + dir.string());
      ObservedAxes axes = collect_axes(cells);
      ReportTables tables =
          emit_tables(cells, axes.methods, axes.horizons, axes.ttes, axes.scales);
      fs::create_directories(out_dir);
      const std::string ext = report_format == "markdown" ? ".md" : ".csv";
      auto write_one = [&](const std::string& name, const std::string& csv) {
        if (csv.empty()) return;
        const std::string path = (fs::path(out_dir) / (name + ext)).string();
        std::ofstream out(path);
        out << (report_format == "markdown" ? csv_to_markdown(csv) : csv);
        std::printf("wrote %s\n", path.c_str());
      };
      write_one("classification", tables.classification_csv());
      write_one("prediction", tables.prediction_csv());
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
