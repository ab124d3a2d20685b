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

// Experiment grid over (method x observation horizon x TTE x ROI scale x
// seed). Completed cells persist as JSON under <outdir>/cells and are never
// recomputed; failed cells are marked and the remaining cells continue. Two
// report tables are emitted: classification (rows method x horizon, TTE 0)
// and prediction (rows method x TTE at a fixed horizon), columns x1..x4,
// two-decimal percentages.

#pragma once

#include <iomanip>
#include <sstream>

#include "lanecast/train.hpp"

namespace lanecast {

struct ExperimentGrid {
  std::vector<ModelKind> methods{ModelKind::Disjoint, ModelKind::StMultiplier};
  std::vector<int> horizons{20};
  std::vector<int> ttes{0};
  std::vector<int> roi_scales{2};
  std::vector<std::uint64_t> seeds{1};
  TrainBudget budget;
  double train_fraction = 0.85;
  bool balance_validation = true;
  int window_stride = 20;
  int guard = 10;
  int roi_output_size = 112;
  FlowStackConfig flow_cfg;
  ModelConfig disjoint_cfg;  // kind fixed per cell; width settings reused
  ModelConfig st_cfg;

  ExperimentGrid() {
    disjoint_cfg.kind = ModelKind::Disjoint;
    st_cfg.kind = ModelKind::StMultiplier;
  }

  void validate() const {
    if (methods.empty() || horizons.empty() || ttes.empty() || roi_scales.empty() ||
        seeds.empty()) {
      throw ConfigError("grid: every axis needs at least one value");
    }
    for (int h : horizons) {
      WindowSpec{h, 0, guard}.validate();
    }
    for (int t : ttes) {
      if (t < 0) throw ConfigError("grid: negative tte");
    }
    for (int s : roi_scales) {
      RoiSpec{s, roi_output_size}.validate();
    }
    disjoint_cfg.disjoint.validate();
    st_cfg.st.validate();
    if (disjoint_cfg.disjoint.input_size != roi_output_size ||
        st_cfg.st.input_size != roi_output_size) {
      throw ConfigError("grid: model input sizes must match roi_output_size");
    }
  }
};

struct CellKey {
  ModelKind method = ModelKind::Disjoint;
  int horizon = 20;
  int tte = 0;
  int roi_scale = 2;
  std::uint64_t seed = 1;

  std::string id() const {
    std::ostringstream os;
    os << to_string(method) << "_N" << horizon << "_tte" << tte << "_x" << roi_scale << "_s"
       << seed;
    return os.str();
  }
};

struct CellResult {
  CellKey key;
  bool failed = false;
  std::string error;
  MetricsReport report;
  std::vector<EpochLog> log;
  bool from_cache = false;
};

inline nlohmann::json cell_to_json(const CellResult& cell) {
  nlohmann::json j;
  j["method"] = to_string(cell.key.method);
  j["horizon"] = cell.key.horizon;
  j["tte"] = cell.key.tte;
  j["roi_scale"] = cell.key.roi_scale;
  j["seed"] = cell.key.seed;
  j["failed"] = cell.failed;
  j["error"] = cell.error;
  j["report"] = metrics_to_json(cell.report);
  auto& log = j["log"] = nlohmann::json::array();
  for (const auto& e : cell.log) {
    log.push_back({{"epoch", e.epoch}, {"loss", e.mean_loss}, {"val_accuracy", e.val_accuracy}});
  }
  return j;
}

inline CellResult cell_from_json(const nlohmann::json& j) {
  CellResult cell;
  const std::string method = j.at("method").get<std::string>();
  cell.key.method = method == "disjoint" ? ModelKind::Disjoint : ModelKind::StMultiplier;
  cell.key.horizon = j.at("horizon").get<int>();
  cell.key.tte = j.at("tte").get<int>();
  cell.key.roi_scale = j.at("roi_scale").get<int>();
  cell.key.seed = j.at("seed").get<std::uint64_t>();
  cell.failed = j.at("failed").get<bool>();
  cell.error = j.value("error", "");
  cell.report = metrics_from_json(j.at("report"));
  if (j.contains("log")) {
    for (const auto& e : j.at("log")) {
      cell.log.push_back(
          {e.at("epoch").get<int>(), e.at("loss").get<double>(),
           e.at("val_accuracy").get<double>()});
    }
  }
  return cell;
}

// ---------------------------------------------------------------------------
// Grid runner
// ---------------------------------------------------------------------------

inline std::vector<CellResult> run_grid(const ExperimentGrid& grid,
                                        const std::vector<VehicleTrack>& tracks,
                                        FrameSource& source, const std::string& outdir,
                                        std::uint64_t global_seed) {
  namespace fs = std::filesystem;
  grid.validate();
  fs::create_directories(fs::path(outdir) / "cells");

  std::vector<CellResult> results;
  // group cells by dataset combo so each (horizon, tte, scale) materializes once
  for (int horizon : grid.horizons) {
    for (int tte : grid.ttes) {
      for (int scale : grid.roi_scales) {
        WindowSpec spec{horizon, tte, grid.guard};
        RoiSpec roi{scale, grid.roi_output_size};

        // skip materialization when every cell of the combo is cached
        bool all_cached = true;
        for (ModelKind method : grid.methods) {
          for (std::uint64_t seed : grid.seeds) {
            const CellKey key{method, horizon, tte, scale, seed};
            if (!fs::exists(fs::path(outdir) / "cells" / (key.id() + ".json"))) {
              all_cached = false;
            }
          }
        }

        MaterializedDataset train_set, val_set;
        bool dataset_ready = false;
        std::string dataset_error;
        auto ensure_dataset = [&]() {
          if (dataset_ready || !dataset_error.empty()) return;
          try {
            auto windows = enumerate_windows(tracks, spec, grid.window_stride);
            if (windows.empty()) throw ContractError("no labelable windows for the combo");
            const std::string combo = "N" + std::to_string(horizon) + "_tte" +
                                      std::to_string(tte) + "_x" + std::to_string(scale);
            const auto split = split_train_val(
                windows, grid.train_fraction,
                hash_combine(hash_combine(global_seed, std::string("split")), combo));
            auto pick = [&](const std::vector<std::size_t>& idx) {
              std::vector<WindowRef> out;
              out.reserve(idx.size());
              for (std::size_t i : idx) out.push_back(windows[i]);
              return out;
            };
            const auto train_windows = pick(split.train);
            const auto val_windows = pick(split.val);
            const int frames = std::max(grid.st_cfg.st.frames, 1);
            train_set = MaterializedDataset::build(source, tracks, train_windows, spec, roi,
                                                   grid.flow_cfg, frames);
            val_set = MaterializedDataset::build(source, tracks, val_windows, spec, roi,
                                                 grid.flow_cfg, frames);
            if (grid.balance_validation && !val_set.empty()) {
              const auto balanced = balance_classes(
                  val_set.labels(), hash_combine(global_seed, std::string("balance")));
              // a validation side missing a class cannot be balanced; keep it whole
              if (!balanced.empty()) val_set = val_set.subset(balanced);
            }
            dataset_ready = true;
          } catch (const Error& e) {
            dataset_error = e.what();
          }
        };

        for (ModelKind method : grid.methods) {
          for (std::uint64_t seed : grid.seeds) {
            CellKey key{method, horizon, tte, scale, seed};
            const fs::path cell_path = fs::path(outdir) / "cells" / (key.id() + ".json");
            if (fs::exists(cell_path)) {
              std::ifstream in(cell_path);
              CellResult cached = cell_from_json(nlohmann::json::parse(in));
              cached.from_cache = true;
              results.push_back(std::move(cached));
              continue;
            }
            (void)all_cached;
            ensure_dataset();

            CellResult cell;
            cell.key = key;
            if (!dataset_error.empty()) {
              cell.failed = true;
              cell.error = dataset_error;
            } else {
              try {
                ModelConfig cfg = method == ModelKind::Disjoint ? grid.disjoint_cfg : grid.st_cfg;
                const std::uint64_t cell_seed =
                    hash_combine(hash_combine(global_seed, std::string(key.id())), seed);
                TrainResult tr = train(cfg, train_set, val_set, grid.budget, cell_seed);
                cell.report = tr.best_report;
                cell.log = tr.log;
                save_checkpoint((fs::path(outdir) / "cells" / (key.id() + ".ckpt")).string(),
                                tr.best_checkpoint);
              } catch (const Error& e) {
                cell.failed = true;
                cell.error = e.what();
              }
            }
            std::ofstream out(cell_path);
            out << cell_to_json(cell).dump(2) << "\n";
            results.push_back(std::move(cell));
          }
        }
      }
    }
  }
  return results;
}

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

namespace reportdetail {

struct CellAggregate {
  std::vector<double> accuracies;  // percent, one per seed
  bool any_failed = false;

  std::string render() const {
    if (accuracies.empty() || any_failed) return "\u2014";  // em dash
    char buf[64];
    if (accuracies.size() == 1) {
      std::snprintf(buf, sizeof(buf), "%.2f", accuracies[0]);
      return buf;
    }
    double mean = 0.0;
    for (double a : accuracies) mean += a;
    mean /= static_cast<double>(accuracies.size());
    double var = 0.0;
    for (double a : accuracies) var += (a - mean) * (a - mean);
    var /= static_cast<double>(accuracies.size());
    std::snprintf(buf, sizeof(buf), "%.2f\u00b1%.2f", mean, std::sqrt(var));
    return buf;
  }
};

}  // namespace reportdetail

struct ReportTables {
  // rows: (method, horizon) -> scale -> cell text
  std::vector<std::string> classification_rows;  // including header, CSV
  std::vector<std::string> prediction_rows;
  std::string classification_csv() const { return join(classification_rows); }
  std::string prediction_csv() const { return join(prediction_rows); }

  static std::string join(const std::vector<std::string>& rows) {
    std::string out;
    for (const auto& r : rows) {
      out += r;
      out += '\n';
    }
    return out;
  }
};

// Accuracy identity is re-checked on every report before rendering.
inline void verify_accuracy_identity(const MetricsReport& r) {
  if (r.total() > 0) {
    const double expect = static_cast<double>(r.trace()) / static_cast<double>(r.total());
    if (std::abs(expect - r.accuracy) > 1e-12) {
      throw ValidationError("report: accuracy does not equal trace/total");
    }
  }
}

inline ReportTables emit_tables(const std::vector<CellResult>& cells,
                                const std::vector<ModelKind>& methods,
                                const std::vector<int>& horizons, const std::vector<int>& ttes,
                                const std::vector<int>& scales) {
  using reportdetail::CellAggregate;
  if (cells.empty()) throw ContractError("emit_report: no cell results");
  for (const auto& c : cells) {
    if (!c.failed) verify_accuracy_identity(c.report);
  }

  std::vector<int> sorted_scales = scales;
  std::sort(sorted_scales.begin(), sorted_scales.end());

  ReportTables tables;
  auto scale_header = [&] {
    std::string h;
    for (int s : sorted_scales) h += ",x" + std::to_string(s);
    return h;
  };

  // classification: TTE = 0 cells, rows method x horizon
  {
    tables.classification_rows.push_back("method,horizon" + scale_header());
    for (ModelKind m : methods) {
      for (int h : horizons) {
        std::string row = std::string(to_string(m)) + "," + std::to_string(h);
        for (int s : sorted_scales) {
          CellAggregate agg;
          for (const auto& c : cells) {
            if (c.key.method == m && c.key.horizon == h && c.key.tte == 0 &&
                c.key.roi_scale == s) {
              if (c.failed) {
                agg.any_failed = true;
              } else {
                agg.accuracies.push_back(100.0 * c.report.accuracy);
              }
            }
          }
          row += "," + agg.render();
        }
        tables.classification_rows.push_back(row);
      }
    }
  }

  // prediction: TTE > 0 cells at one fixed horizon (20 when present)
  {
    std::vector<int> pred_ttes;
    for (int t : ttes) {
      if (t > 0) pred_ttes.push_back(t);
    }
    if (!pred_ttes.empty()) {
      int pred_horizon = horizons.front();
      for (int h : horizons) {
        if (h == 20) pred_horizon = 20;
      }
      tables.prediction_rows.push_back("method,tte" + scale_header());
      for (ModelKind m : methods) {
        for (int t : pred_ttes) {
          std::string row = std::string(to_string(m)) + "," + std::to_string(t);
          for (int s : sorted_scales) {
            CellAggregate agg;
            for (const auto& c : cells) {
              if (c.key.method == m && c.key.horizon == pred_horizon && c.key.tte == t &&
                  c.key.roi_scale == s) {
                if (c.failed) {
                  agg.any_failed = true;
                } else {
                  agg.accuracies.push_back(100.0 * c.report.accuracy);
                }
              }
            }
            row += "," + agg.render();
          }
          tables.prediction_rows.push_back(row);
        }
      }
    }
  }
  return tables;
}

inline std::string csv_to_markdown(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::string out;
  bool first = true;
  while (std::getline(in, line)) {
    std::string row = "| ";
    std::size_t cols = 1;
    for (char ch : line) {
      if (ch == ',') {
        row += " | ";
        ++cols;
      } else {
        row += ch;
      }
    }
    row += " |\n";
    out += row;
    if (first) {
      out += "|";
      for (std::size_t i = 0; i < cols; ++i) out += " --- |";
      out += "\n";
      first = false;
    }
  }
  return out;
}

// Writes classification/prediction tables as CSV or markdown files under dir.
inline std::vector<std::string> emit_report(const std::vector<CellResult>& cells,
                                            const ExperimentGrid& grid, const std::string& dir,
                                            const std::string& format) {
  namespace fs = std::filesystem;
  if (format != "csv" && format != "markdown") {
    throw ConfigError("emit_report: format must be csv or markdown");
  }
  fs::create_directories(dir);
  ReportTables tables =
      emit_tables(cells, grid.methods, grid.horizons, grid.ttes, grid.roi_scales);
  std::vector<std::string> written;
  const std::string ext = format == "csv" ? ".csv" : ".md";
  auto write_one = [&](const std::string& name, const std::string& csv) {
    if (csv.empty()) return;
    const std::string path = (fs::path(dir) / (name + ext)).string();
    std::ofstream out(path);
    if (!out) throw IoError("emit_report: cannot write " + path);
    out << (format == "csv" ? csv : csv_to_markdown(csv));
    written.push_back(path);
  };
  write_one("classification", tables.classification_csv());
  write_one("prediction", tables.prediction_csv());
  return written;
}

}  // namespace lanecast
