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

// Training loop and evaluation.
//
// Samples are materialized once into a compact cache (appearance frames as
// bytes, flow channels as signed bytes at 1/127 resolution) and batches are
// assembled on the fly. Everything stochastic is seeded, and all parallel
// reductions run in a fixed order, so a (config, seed) pair reproduces the
// same log and checkpoint bit for bit.

#pragma once

#include <chrono>

#include "lanecast/models.hpp"
#include "lanecast/optim.hpp"
#include "lanecast/synth.hpp"

namespace lanecast {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricsReport {
  std::array<std::array<std::int64_t, 3>, 3> confusion{};  // [true][predicted]
  double accuracy = 0.0;
  std::array<std::int64_t, 3> class_counts{};
  double wall_clock_sec = 0.0;
  std::uint64_t seed = 0;

  std::int64_t total() const {
    std::int64_t n = 0;
    for (const auto& row : confusion)
      for (std::int64_t v : row) n += v;
    return n;
  }
  std::int64_t trace() const {
    return confusion[0][0] + confusion[1][1] + confusion[2][2];
  }
  void finalize() {
    const std::int64_t n = total();
    accuracy = n == 0 ? 0.0 : static_cast<double>(trace()) / static_cast<double>(n);
    for (int c = 0; c < 3; ++c) {
      class_counts[c] = confusion[c][0] + confusion[c][1] + confusion[c][2];
    }
  }
};

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["confusion"] = r.confusion;
  j["accuracy"] = r.accuracy;
  j["class_counts"] = r.class_counts;
  j["wall_clock_sec"] = r.wall_clock_sec;
  j["seed"] = r.seed;
  return j;
}

inline MetricsReport metrics_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.confusion = j.at("confusion").get<std::array<std::array<std::int64_t, 3>, 3>>();
  r.accuracy = j.at("accuracy").get<double>();
  r.class_counts = j.at("class_counts").get<std::array<std::int64_t, 3>>();
  r.wall_clock_sec = j.value("wall_clock_sec", 0.0);
  r.seed = j.value("seed", std::uint64_t{0});
  return r;
}

// ---------------------------------------------------------------------------
// Materialized sample cache
// ---------------------------------------------------------------------------

class MaterializedDataset {
 public:
  struct Entry {
    ManeuverClass label = ManeuverClass::NLC;
    std::string clip_id;
    std::int64_t track_id = 0;
    std::int64_t end_frame = 0;
    std::vector<std::uint8_t> appearance;  // frames * 3 * S * S, [0,1] * 255
    std::vector<std::int8_t> flow;         // 2L * S * S, [-1,1] * 127
  };

  // Materializes every window, per track, parallel across tracks. The entry
  // order follows `windows`, independent of scheduling.
  static MaterializedDataset build(FrameSource& source, const std::vector<VehicleTrack>& tracks,
                                   const std::vector<WindowRef>& windows, const WindowSpec& spec,
                                   const RoiSpec& roi, const FlowStackConfig& flow_cfg,
                                   int appearance_frames) {
    if (appearance_frames < 1) throw ConfigError("dataset cache: appearance_frames must be >= 1");
    MaterializedDataset ds;
    ds.input_size_ = static_cast<std::size_t>(roi.output_size);
    ds.flow_fields_ = static_cast<std::size_t>(flow_cfg.fields);
    ds.appearance_frames_ = static_cast<std::size_t>(appearance_frames);
    ds.entries_.resize(windows.size());

    // group window indices by track so clips render once per track
    std::map<std::size_t, std::vector<std::size_t>> by_track;
    for (std::size_t i = 0; i < windows.size(); ++i) {
      by_track[windows[i].track_index].push_back(i);
    }
    std::vector<std::pair<std::size_t, std::vector<std::size_t>>> groups(by_track.begin(),
                                                                         by_track.end());
    parallel_for(groups.size(), [&](std::size_t g0, std::size_t g1) {
      for (std::size_t g = g0; g < g1; ++g) {
        const auto& [track_index, idx_list] = groups[g];
        for (std::size_t wi : idx_list) {
          SampleWindow sample = materialize_window(source, tracks[track_index], windows[wi],
                                                   spec, roi, flow_cfg);
          ds.entries_[wi] = compress(sample, ds.appearance_frames_);
        }
      }
    });
    return ds;
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t input_size() const { return input_size_; }
  std::size_t flow_fields() const { return flow_fields_; }
  std::size_t appearance_frames() const { return appearance_frames_; }
  const Entry& entry(std::size_t i) const { return entries_.at(i); }

  std::vector<ManeuverClass> labels() const {
    std::vector<ManeuverClass> out(entries_.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = entries_[i].label;
    return out;
  }

  std::vector<int> batch_targets(const std::vector<std::size_t>& indices) const {
    std::vector<int> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      out[i] = static_cast<int>(entries_[indices[i]].label);
    }
    return out;
  }

  // (B, 3, S, S): the window's last frame
  Tensor<float> batch_appearance_last(const std::vector<std::size_t>& indices) const {
    const std::size_t s = input_size_, frame = 3 * s * s;
    std::vector<float> out(indices.size() * frame);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const auto& e = entries_[indices[i]];
      const std::uint8_t* src = e.appearance.data() + (appearance_frames_ - 1) * frame;
      float* dst = out.data() + i * frame;
      for (std::size_t k = 0; k < frame; ++k) dst[k] = dequant_appearance(src[k]);
    }
    return Tensor<float>::from_raw({indices.size(), 3, s, s}, std::move(out));
  }

  // (B, T_s, 3, S, S)
  Tensor<float> batch_appearance_stack(const std::vector<std::size_t>& indices) const {
    const std::size_t s = input_size_, total = appearance_frames_ * 3 * s * s;
    std::vector<float> out(indices.size() * total);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const auto& e = entries_[indices[i]];
      float* dst = out.data() + i * total;
      for (std::size_t k = 0; k < total; ++k) dst[k] = dequant_appearance(e.appearance[k]);
    }
    return Tensor<float>::from_raw({indices.size(), appearance_frames_, 3, s, s},
                                   std::move(out));
  }

  // (B, 2L, S, S)
  Tensor<float> batch_flow_channels(const std::vector<std::size_t>& indices) const {
    const std::size_t s = input_size_, total = 2 * flow_fields_ * s * s;
    std::vector<float> out(indices.size() * total);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const auto& e = entries_[indices[i]];
      float* dst = out.data() + i * total;
      for (std::size_t k = 0; k < total; ++k) dst[k] = dequant_flow(e.flow[k]);
    }
    return Tensor<float>::from_raw({indices.size(), 2 * flow_fields_, s, s}, std::move(out));
  }

  // (B, L, 2, S, S): same memory order as the channel stack
  Tensor<float> batch_flow_fields(const std::vector<std::size_t>& indices) const {
    Tensor<float> t = batch_flow_channels(indices);
    return Tensor<float>::from_raw({indices.size(), flow_fields_, 2, input_size_, input_size_},
                                   std::vector<float>(t.data().begin(), t.data().end()));
  }

  MaterializedDataset subset(const std::vector<std::size_t>& indices) const {
    MaterializedDataset ds;
    ds.input_size_ = input_size_;
    ds.flow_fields_ = flow_fields_;
    ds.appearance_frames_ = appearance_frames_;
    ds.entries_.reserve(indices.size());
    for (std::size_t i : indices) ds.entries_.push_back(entries_.at(i));
    return ds;
  }

 private:
  static float dequant_appearance(std::uint8_t q) {
    return static_cast<float>(q) / 127.5f - 1.0f;
  }
  static float dequant_flow(std::int8_t q) { return static_cast<float>(q) / 127.0f; }

  static Entry compress(const SampleWindow& sample, std::size_t appearance_frames) {
    Entry e;
    e.label = sample.label;
    e.clip_id = sample.clip_id;
    e.track_id = sample.track_id;
    e.end_frame = sample.end_frame;
    const std::size_t frame = sample.appearance.front().size();
    const auto frame_idx = uniform_indices(appearance_frames, sample.appearance.size());
    e.appearance.resize(appearance_frames * frame);
    for (std::size_t f = 0; f < frame_idx.size(); ++f) {
      const auto src = sample.appearance[frame_idx[f]].data();
      std::uint8_t* dst = e.appearance.data() + f * frame;
      for (std::size_t k = 0; k < frame; ++k) {
        // appearance is standardized to [-1, 1]; store as bytes
        const float v = std::clamp((src[k] + 1.0f) * 127.5f, 0.0f, 255.0f);
        dst[k] = static_cast<std::uint8_t>(std::lround(v));
      }
    }
    e.flow.resize(sample.flow_stack.size());
    const auto fs = sample.flow_stack.data();
    for (std::size_t k = 0; k < e.flow.size(); ++k) {
      e.flow[k] = static_cast<std::int8_t>(std::lround(std::clamp(fs[k], -1.0f, 1.0f) * 127.0f));
    }
    return e;
  }

  std::vector<Entry> entries_;
  std::size_t input_size_ = 112;
  std::size_t flow_fields_ = 10;
  std::size_t appearance_frames_ = 5;
};

// Deterministic class-balanced subsample: per class, keep the first
// min-class-count indices under a seeded shuffle.
inline std::vector<std::size_t> balance_classes(const std::vector<ManeuverClass>& labels,
                                                std::uint64_t seed) {
  std::array<std::vector<std::size_t>, 3> pools;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    pools[static_cast<int>(labels[i])].push_back(i);
  }
  std::size_t min_count = labels.size();
  for (const auto& p : pools) min_count = std::min(min_count, p.size());
  std::mt19937_64 engine(seed);
  std::vector<std::size_t> out;
  for (auto& p : pools) {
    std::shuffle(p.begin(), p.end(), engine);
    out.insert(out.end(), p.begin(), p.begin() + static_cast<std::ptrdiff_t>(min_count));
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Model wrapper shared by the trainer and evaluator
// ---------------------------------------------------------------------------

class TrainableModel {
 public:
  TrainableModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.kind == ModelKind::Disjoint) {
      disjoint_ = std::make_unique<DisjointTwoStream<float>>(cfg.disjoint, seed);
    } else {
      st_ = std::make_unique<StMultiplierModel<float>>(cfg.st, seed);
    }
  }

  const ModelConfig& config() const { return cfg_; }

  ParamRegistry<float>& registry() {
    return disjoint_ ? disjoint_->registry() : st_->registry();
  }

  void check_dataset(const MaterializedDataset& ds) const {
    if (ds.input_size() != static_cast<std::size_t>(cfg_.input_size())) {
      throw ConfigError("model expects input size " + std::to_string(cfg_.input_size()) +
                        ", dataset cache has " + std::to_string(ds.input_size()));
    }
    if (ds.flow_fields() != static_cast<std::size_t>(cfg_.flow_fields())) {
      throw ConfigError("model expects " + std::to_string(cfg_.flow_fields()) +
                        " flow fields, dataset cache has " + std::to_string(ds.flow_fields()));
    }
    if (cfg_.kind == ModelKind::StMultiplier &&
        ds.appearance_frames() != static_cast<std::size_t>(cfg_.st.frames)) {
      throw ConfigError("model expects " + std::to_string(cfg_.st.frames) +
                        " appearance frames, dataset cache has " +
                        std::to_string(ds.appearance_frames()));
    }
  }

  Tensor<float> train_loss(const MaterializedDataset& ds,
                           const std::vector<std::size_t>& indices) {
    const std::vector<int> targets = ds.batch_targets(indices);
    if (disjoint_) {
      auto step = disjoint_->forward_loss(ds.batch_appearance_last(indices),
                                          ds.batch_flow_channels(indices), targets);
      return step.loss;
    }
    auto step = st_->forward_loss(ds.batch_appearance_stack(indices),
                                  ds.batch_flow_fields(indices), targets);
    return step.loss;
  }

  Tensor<float> eval_probs(const MaterializedDataset& ds,
                           const std::vector<std::size_t>& indices) {
    if (disjoint_) {
      return disjoint_->forward_fused(ds.batch_appearance_last(indices),
                                      ds.batch_flow_channels(indices));
    }
    return st_->forward_probs(ds.batch_appearance_stack(indices),
                              ds.batch_flow_fields(indices));
  }

 private:
  ModelConfig cfg_;
  std::unique_ptr<DisjointTwoStream<float>> disjoint_;
  std::unique_ptr<StMultiplierModel<float>> st_;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline MetricsReport evaluate_model(TrainableModel& model, const MaterializedDataset& val,
                                    std::uint64_t seed = 0, std::size_t batch_size = 16) {
  if (val.empty()) throw ContractError("evaluate: empty validation set");
  model.check_dataset(val);
  const auto start = std::chrono::steady_clock::now();
  MetricsReport report;
  report.seed = seed;
  for (std::size_t begin = 0; begin < val.size(); begin += batch_size) {
    const std::size_t end = std::min(val.size(), begin + batch_size);
    std::vector<std::size_t> indices(end - begin);
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = begin + i;
    Tensor<float> probs = model.eval_probs(val, indices);
    const auto preds = predict(probs);
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const int truth = static_cast<int>(val.entry(indices[i]).label);
      report.confusion[truth][static_cast<int>(preds[i])] += 1;
    }
  }
  report.finalize();
  report.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

inline MetricsReport evaluate_checkpoint(const ModelConfig& cfg, const std::string& path,
                                         const MaterializedDataset& val) {
  TrainableModel model(cfg, 0);
  load_entries_into_registry(model.registry(), load_checkpoint(path));
  return evaluate_model(model, val);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainBudget {
  int epochs = 30;
  std::size_t batch_size = 16;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double lr_decay = 0.1;       // learning-rate multiplier applied once
  double lr_decay_at = 0.75;   // fraction of the epoch budget
  int early_stop_patience = 5; // epochs without validation improvement
  double early_stop_target = -1.0;  // stop once best val accuracy reaches this
};

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  MetricsReport best_report;
  int best_epoch = 0;  // 0 = untrained
  std::vector<CheckpointEntry> best_checkpoint;
  double wall_clock_sec = 0.0;
};

// Deterministic per (configs, budget, seed). Keeps the checkpoint with the
// best validation accuracy; an epoch budget of 0 yields the untrained model.
inline TrainResult train(const ModelConfig& cfg, const MaterializedDataset& train_set,
                         const MaterializedDataset& val_set, const TrainBudget& budget,
                         std::uint64_t seed) {
  if (budget.epochs < 0) throw ConfigError("train: negative epoch budget");
  if (budget.batch_size < 3) throw ConfigError("train: batch size must be >= 3");
  if (train_set.empty()) throw ContractError("train: empty training set");

  const auto start = std::chrono::steady_clock::now();
  TrainableModel model(cfg, hash_combine(seed, std::string("init")));
  model.check_dataset(train_set);

  // every class must be present before balanced sampling can work
  const std::vector<ManeuverClass> labels = train_set.labels();
  {
    std::array<std::int64_t, 3> counts{};
    for (ManeuverClass c : labels) counts[static_cast<int>(c)]++;
    for (int c = 0; c < 3; ++c) {
      if (counts[c] == 0) {
        throw ConfigError(std::string("train: class ") +
                          to_string(static_cast<ManeuverClass>(c)) +
                          " has zero training samples");
      }
    }
  }

  OptimizerState<float> optimizer(model.registry().trainable_params(),
                                  static_cast<float>(budget.learning_rate),
                                  static_cast<float>(budget.momentum));

  TrainResult result;
  result.best_report = evaluate_model(model, val_set, seed);
  result.best_epoch = 0;
  result.best_checkpoint = registry_to_entries(model.registry());

  const std::size_t steps_per_epoch = std::max<std::size_t>(1, labels.size() / budget.batch_size);
  const int decay_epoch = budget.epochs > 0
                              ? std::max(1, static_cast<int>(budget.lr_decay_at * budget.epochs))
                              : 0;
  int epochs_since_best = 0;
  for (int epoch = 1; epoch <= budget.epochs; ++epoch) {
    if (epoch == decay_epoch && budget.lr_decay > 0 && budget.lr_decay < 1) {
      optimizer.set_learning_rate(
          static_cast<float>(optimizer.learning_rate() * budget.lr_decay));
    }
    BalancedBatchSampler sampler(labels, budget.batch_size,
                                 hash_combine(hash_combine(seed, std::string("epoch")),
                                              static_cast<std::uint64_t>(epoch)));
    double loss_sum = 0.0;
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      const std::vector<std::size_t> batch = sampler.next_batch();
      try {
        Tensor<float> loss = model.train_loss(train_set, batch);
        loss_sum += loss.item();
        loss.backward();
        optimizer.step();
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " step " +
                           std::to_string(step + 1) + ": " + e.what());
      }
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.mean_loss = loss_sum / static_cast<double>(steps_per_epoch);
    MetricsReport val_report = evaluate_model(model, val_set, seed);
    entry.val_accuracy = val_report.accuracy;
    result.log.push_back(entry);

    if (val_report.accuracy > result.best_report.accuracy) {
      result.best_report = val_report;
      result.best_epoch = epoch;
      result.best_checkpoint = registry_to_entries(model.registry());
      epochs_since_best = 0;
    } else {
      ++epochs_since_best;
    }
    if (budget.early_stop_target > 0 &&
        result.best_report.accuracy >= budget.early_stop_target) {
      break;
    }
    if (budget.early_stop_patience > 0 && epochs_since_best >= budget.early_stop_patience) {
      break;
    }
  }

  result.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace lanecast
