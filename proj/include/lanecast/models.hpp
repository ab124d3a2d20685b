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

// The two lane-change classifiers.
//
// Disjoint two-stream: an appearance CNN over the window's last frame and a
// motion CNN over the stacked flow channels, trained independently, fused at
// prediction time as the mean of the two softmax outputs. Both streams share
// one layout: 5 conv layers, 3 fully connected layers, ReLU everywhere,
// 3-way output.
//
// Spatiotemporal multiplier: residual appearance and motion streams in
// lockstep. At every block the appearance residual branch consumes
// x_a * relu(x_m) (elementwise), i.e. the motion stream multiplicatively
// gates the appearance stream; the identity path is relu(x_a), projected
// when the shape changes. Depthwise 1-D temporal convolutions are injected
// after configured stages. One linear head reads the concatenated
// space-time-pooled features of both streams.

#pragma once

#include <nlohmann/json.hpp>

#include "lanecast/checkpoint.hpp"
#include "lanecast/dataset.hpp"
#include "lanecast/layers.hpp"

namespace lanecast {

// ---------------------------------------------------------------------------
// Configs
// ---------------------------------------------------------------------------

enum class ModelKind { Disjoint, StMultiplier };

inline const char* to_string(ModelKind k) {
  return k == ModelKind::Disjoint ? "disjoint" : "st-multiplier";
}

struct DisjointConfig {
  int input_size = 112;
  int flow_fields = 10;  // L
  std::vector<std::size_t> conv_channels{16, 32, 64, 64, 64};
  std::vector<std::size_t> fc_sizes{256, 128};

  void validate() const {
    if (conv_channels.size() != 5) {
      throw ConfigError("disjoint: exactly 5 conv layers expected");
    }
    if (fc_sizes.size() != 2) {
      throw ConfigError("disjoint: exactly 2 hidden fully connected sizes expected");
    }
    if (input_size < 32) throw ConfigError("disjoint: input size too small");
    if (flow_fields < 1) throw ConfigError("disjoint: flow fields must be >= 1");
  }
};

struct StMultiplierConfig {
  int input_size = 112;
  int frames = 5;        // T_s appearance frames per window
  int flow_fields = 10;  // L flow fields per window; must divide by frames
  std::size_t stem_channels = 12;
  std::vector<std::size_t> stage_channels{12, 24, 48, 96};
  std::vector<std::size_t> stage_blocks{2, 2, 2, 2};
  std::vector<int> temporal_after_stages{2, 4};  // 1-based stage indices
  int temporal_kernel = 3;

  void validate() const {
    if (stage_channels.empty() || stage_channels.size() != stage_blocks.size()) {
      throw ConfigError("st-multiplier: stage_channels and stage_blocks must align");
    }
    if (frames < 1) throw ConfigError("st-multiplier: frames must be >= 1");
    if (flow_fields % frames != 0) {
      throw ConfigError("st-multiplier: flow_fields must be divisible by frames");
    }
    if (temporal_kernel % 2 == 0) throw ConfigError("st-multiplier: temporal kernel must be odd");
    for (int s : temporal_after_stages) {
      if (s < 1 || s > static_cast<int>(stage_channels.size())) {
        throw ConfigError("st-multiplier: temporal placement outside stage range");
      }
    }
    if (input_size < 32) throw ConfigError("st-multiplier: input size too small");
  }
};

struct ModelConfig {
  ModelKind kind = ModelKind::Disjoint;
  DisjointConfig disjoint;
  StMultiplierConfig st;

  int input_size() const {
    return kind == ModelKind::Disjoint ? disjoint.input_size : st.input_size;
  }
  int flow_fields() const {
    return kind == ModelKind::Disjoint ? disjoint.flow_fields : st.flow_fields;
  }
  int appearance_frames() const { return kind == ModelKind::Disjoint ? 1 : st.frames; }
};

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "disjoint") {
    cfg.kind = ModelKind::Disjoint;
    auto& d = cfg.disjoint;
    d.input_size = j.value("input_size", d.input_size);
    d.flow_fields = j.value("flow_fields", d.flow_fields);
    if (j.contains("conv_channels")) {
      d.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
    }
    if (j.contains("fc_sizes")) d.fc_sizes = j.at("fc_sizes").get<std::vector<std::size_t>>();
    d.validate();
  } else if (kind == "st-multiplier") {
    cfg.kind = ModelKind::StMultiplier;
    auto& s = cfg.st;
    s.input_size = j.value("input_size", s.input_size);
    s.frames = j.value("frames", s.frames);
    s.flow_fields = j.value("flow_fields", s.flow_fields);
    s.stem_channels = j.value("stem_channels", s.stem_channels);
    if (j.contains("stage_channels")) {
      s.stage_channels = j.at("stage_channels").get<std::vector<std::size_t>>();
    }
    if (j.contains("stage_blocks")) {
      s.stage_blocks = j.at("stage_blocks").get<std::vector<std::size_t>>();
    }
    if (j.contains("temporal_after_stages")) {
      s.temporal_after_stages = j.at("temporal_after_stages").get<std::vector<int>>();
    }
    s.temporal_kernel = j.value("temporal_kernel", s.temporal_kernel);
    s.validate();
  } else {
    throw ConfigError("model config: unknown kind '" + kind + "'");
  }
  return cfg;
}

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["kind"] = to_string(cfg.kind);
  if (cfg.kind == ModelKind::Disjoint) {
    j["input_size"] = cfg.disjoint.input_size;
    j["flow_fields"] = cfg.disjoint.flow_fields;
    j["conv_channels"] = cfg.disjoint.conv_channels;
    j["fc_sizes"] = cfg.disjoint.fc_sizes;
  } else {
    j["input_size"] = cfg.st.input_size;
    j["frames"] = cfg.st.frames;
    j["flow_fields"] = cfg.st.flow_fields;
    j["stem_channels"] = cfg.st.stem_channels;
    j["stage_channels"] = cfg.st.stage_channels;
    j["stage_blocks"] = cfg.st.stage_blocks;
    j["temporal_after_stages"] = cfg.st.temporal_after_stages;
    j["temporal_kernel"] = cfg.st.temporal_kernel;
  }
  return j;
}

// ---------------------------------------------------------------------------
// Parameter registry shared by both architectures
// ---------------------------------------------------------------------------

template <typename T>
struct NamedTensor {
  std::string name;
  std::string kind;
  Tensor<T> tensor;
  bool trainable = true;
};

template <typename T>
class ParamRegistry {
 public:
  void add(const std::string& name, const std::string& kind, Tensor<T> t, bool trainable = true) {
    entries_.push_back({name, kind, std::move(t), trainable});
  }
  void add_conv(const std::string& name, Conv2d<T>& c) {
    add(name + ".weight", "conv2d", c.weight);
    if (c.bias.defined()) add(name + ".bias", "conv2d", c.bias);
  }
  void add_linear(const std::string& name, Linear<T>& l) {
    add(name + ".weight", "linear", l.weight);
    add(name + ".bias", "linear", l.bias);
  }
  void add_bn(const std::string& name, BatchNorm<T>& bn) {
    add(name + ".gamma", "batchnorm", bn.gamma);
    add(name + ".beta", "batchnorm", bn.beta);
    add(name + ".running_mean", "batchnorm", bn.running_mean, false);
    add(name + ".running_var", "batchnorm", bn.running_var, false);
  }
  void add_temporal(const std::string& name, Conv1dTemporal<T>& c) {
    add(name + ".weight", "conv1d-temporal", c.weight);
    add(name + ".bias", "conv1d-temporal", c.bias);
  }

  const std::vector<NamedTensor<T>>& entries() const { return entries_; }

  std::vector<Tensor<T>> trainable_params() const {
    std::vector<Tensor<T>> out;
    for (const auto& e : entries_) {
      if (e.trainable) out.push_back(e.tensor);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
      if (e.trainable) n += e.tensor.size();
    }
    return n;
  }

 private:
  std::vector<NamedTensor<T>> entries_;
};

// ---------------------------------------------------------------------------
// Disjoint two-stream network
// ---------------------------------------------------------------------------

template <typename T>
class DisjointStream {
 public:
  DisjointStream() = default;

  DisjointStream(std::size_t in_channels, const DisjointConfig& cfg, Rng& rng) {
    const auto& ch = cfg.conv_channels;
    convs_.push_back(make_conv2d<T>(in_channels, ch[0], 7, 2, 3, true, rng));
    convs_.push_back(make_conv2d<T>(ch[0], ch[1], 5, 1, 2, true, rng));
    convs_.push_back(make_conv2d<T>(ch[1], ch[2], 3, 1, 1, true, rng));
    convs_.push_back(make_conv2d<T>(ch[2], ch[3], 3, 1, 1, true, rng));
    convs_.push_back(make_conv2d<T>(ch[3], ch[4], 3, 1, 1, true, rng));

    // spatial extents: conv1/2 then pools after conv1, conv2 and conv5
    std::size_t s = static_cast<std::size_t>(cfg.input_size);
    s = (s + 2 * 3 - 7) / 2 + 1;  // conv1
    s = (s - 3) / 2 + 1;          // pool1
    s = (s - 3) / 2 + 1;          // pool2 (conv2..conv5 preserve extent)
    s = (s - 3) / 2 + 1;          // pool5
    flat_ = ch[4] * s * s;

    fcs_.push_back(make_linear<T>(flat_, cfg.fc_sizes[0], rng));
    fcs_.push_back(make_linear<T>(cfg.fc_sizes[0], cfg.fc_sizes[1], rng));
    fcs_.push_back(make_linear<T>(cfg.fc_sizes[1], 3, rng));
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> h = relu(conv2d_forward(convs_[0], x));
    h = max_pool2d(h, 3, 2, 0);
    h = relu(conv2d_forward(convs_[1], h));
    h = max_pool2d(h, 3, 2, 0);
    h = relu(conv2d_forward(convs_[2], h));
    h = relu(conv2d_forward(convs_[3], h));
    h = relu(conv2d_forward(convs_[4], h));
    h = max_pool2d(h, 3, 2, 0);
    h = reshape(h, {h.dim(0), flat_});
    h = relu(linear_forward(fcs_[0], h));
    h = relu(linear_forward(fcs_[1], h));
    return linear_forward(fcs_[2], h);  // logits
  }

  void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      reg.add_conv(prefix + ".conv" + std::to_string(i + 1), convs_[i]);
    }
    for (std::size_t i = 0; i < fcs_.size(); ++i) {
      reg.add_linear(prefix + ".fc" + std::to_string(i + 1), fcs_[i]);
    }
  }

 private:
  std::vector<Conv2d<T>> convs_;
  std::vector<Linear<T>> fcs_;
  std::size_t flat_ = 0;
};

template <typename T>
class DisjointTwoStream {
 public:
  DisjointTwoStream(const DisjointConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(hash_combine(seed, std::string("disjoint")));
    spatial_ = DisjointStream<T>(3, cfg, rng);
    motion_ = DisjointStream<T>(2 * static_cast<std::size_t>(cfg.flow_fields), cfg, rng);
    spatial_.register_params(registry_, "spatial");
    motion_.register_params(registry_, "motion");
  }

  const DisjointConfig& config() const { return cfg_; }
  ParamRegistry<T>& registry() { return registry_; }
  const ParamRegistry<T>& registry() const { return registry_; }

  void check_inputs(const Tensor<T>& appearance, const Tensor<T>& flow_stack) const {
    const auto s = static_cast<std::size_t>(cfg_.input_size);
    if (appearance.rank() != 4 || appearance.dim(1) != 3 || appearance.dim(2) != s ||
        appearance.dim(3) != s) {
      throw DimensionError("disjoint: appearance must be Bx3x" + std::to_string(s) + "x" +
                           std::to_string(s) + ", got " + shape_str(appearance.shape()));
    }
    const auto fc = 2 * static_cast<std::size_t>(cfg_.flow_fields);
    if (flow_stack.rank() != 4 || flow_stack.dim(1) != fc || flow_stack.dim(2) != s ||
        flow_stack.dim(3) != s) {
      throw DimensionError("disjoint: flow stack must be Bx" + std::to_string(fc) + "x" +
                           std::to_string(s) + "x" + std::to_string(s) + ", got " +
                           shape_str(flow_stack.shape()));
    }
    if (appearance.dim(0) != flow_stack.dim(0)) {
      throw DimensionError("disjoint: appearance and flow batches differ");
    }
  }

  // The streams learn independently; training backpropagates the sum of the
  // two losses, which never mixes gradients because no parameter is shared.
  struct TrainStep {
    Tensor<T> loss;        // scalar, attached
    Tensor<T> fused_probs; // detached
  };

  TrainStep forward_loss(const Tensor<T>& appearance, const Tensor<T>& flow_stack,
                         const std::vector<int>& targets) {
    check_inputs(appearance, flow_stack);
    auto sp = softmax_cross_entropy(spatial_.forward(appearance), targets);
    auto mo = softmax_cross_entropy(motion_.forward(flow_stack), targets);
    TrainStep step;
    step.loss = add(sp.loss, mo.loss);
    step.fused_probs = fuse(sp.probs, mo.probs);
    return step;
  }

  // Mean of the two stream softmax distributions.
  Tensor<T> forward_fused(const Tensor<T>& appearance, const Tensor<T>& flow_stack) {
    check_inputs(appearance, flow_stack);
    NoGradGuard ng;
    Tensor<T> sp = softmax_rows(spatial_.forward(appearance));
    Tensor<T> mo = softmax_rows(motion_.forward(flow_stack));
    return fuse(sp, mo);
  }

  static Tensor<T> fuse(const Tensor<T>& probs_a, const Tensor<T>& probs_b) {
    require_same_shape(probs_a, probs_b, "fuse");
    std::vector<T> out(probs_a.size());
    const auto a = probs_a.data();
    const auto b = probs_b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (a[i] + b[i]) / T(2);
    return Tensor<T>::from_raw(probs_a.shape(), std::move(out));
  }

 private:
  DisjointConfig cfg_;
  DisjointStream<T> spatial_;
  DisjointStream<T> motion_;
  ParamRegistry<T> registry_;
};

// ---------------------------------------------------------------------------
// Spatiotemporal multiplier network
// ---------------------------------------------------------------------------

// One pre-activation residual unit: out = identity(relu(x)) + F(branch),
// F = conv3x3(stride) - bn - relu - conv3x3 - bn. The caller chooses the
// branch input, which is how the multiplicative gate enters.
template <typename T>
struct ResidualUnit {
  Conv2d<T> conv1, conv2;
  BatchNorm<T> bn1, bn2;
  bool has_proj = false;
  Conv2d<T> proj;
  BatchNorm<T> proj_bn;

  ResidualUnit() = default;
  ResidualUnit(std::size_t cin, std::size_t cout, std::size_t stride, Rng& rng) {
    conv1 = make_conv2d<T>(cin, cout, 3, stride, 1, false, rng);
    bn1 = make_batchnorm<T>(cout);
    conv2 = make_conv2d<T>(cout, cout, 3, 1, 1, false, rng);
    bn2 = make_batchnorm<T>(cout);
    has_proj = stride != 1 || cin != cout;
    if (has_proj) {
      proj = make_conv2d<T>(cin, cout, 1, stride, 0, false, rng);
      proj_bn = make_batchnorm<T>(cout);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& branch, bool training) {
    Tensor<T> fx = relu(x);
    Tensor<T> identity = fx;
    if (has_proj) {
      identity = batchnorm_forward(proj_bn, conv2d_forward(proj, fx), training);
    }
    Tensor<T> r = batchnorm_forward(bn1, conv2d_forward(conv1, branch), training);
    r = relu(r);
    r = batchnorm_forward(bn2, conv2d_forward(conv2, r), training);
    return add(identity, r);
  }

  void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    reg.add_conv(prefix + ".conv1", conv1);
    reg.add_bn(prefix + ".bn1", bn1);
    reg.add_conv(prefix + ".conv2", conv2);
    reg.add_bn(prefix + ".bn2", bn2);
    if (has_proj) {
      reg.add_conv(prefix + ".proj", proj);
      reg.add_bn(prefix + ".proj_bn", proj_bn);
    }
  }
};

// Paired appearance/motion residual units with the multiplicative gate.
template <typename T>
struct StBlockParams {
  ResidualUnit<T> appearance;
  ResidualUnit<T> motion;

  StBlockParams() = default;
  StBlockParams(std::size_t cin, std::size_t cout, std::size_t stride, Rng& rng)
      : appearance(cin, cout, stride, rng), motion(cin, cout, stride, rng) {}

  void register_params(ParamRegistry<T>& reg, const std::string& prefix) {
    appearance.register_params(reg, prefix + ".a");
    motion.register_params(reg, prefix + ".m");
  }
};

// Appearance branch input is x_a gated by relu(x_m); the motion stream runs
// an ungated residual unit on x_m. Gradients reach x_m through the gate
// product as well as its own stream.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> st_block_forward(StBlockParams<T>& block, const Tensor<T>& x_a,
                                                 const Tensor<T>& x_m, bool training = true) {
  require_same_shape(x_a, x_m, "st_block");
  Tensor<T> gated = mul(x_a, relu(x_m));
  Tensor<T> a_next = block.appearance.forward(x_a, gated, training);
  Tensor<T> m_next = block.motion.forward(x_m, x_m, training);
  return {std::move(a_next), std::move(m_next)};
}

// (B, S, C, H, W) -> (B*H*W, C, S) and back, for the temporal convolutions.
template <typename T>
Tensor<T> video_to_bct(const Tensor<T>& x) {
  if (x.rank() != 5) throw DimensionError("video_to_bct: need BxTxCxHxW");
  const std::size_t b = x.dim(0), t = x.dim(1), c = x.dim(2), h = x.dim(3), w = x.dim(4);
  const std::size_t hw = h * w;
  std::vector<T> out(x.size());
  const auto xv = x.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ti = 0; ti < t; ++ti)
      for (std::size_t ci = 0; ci < c; ++ci) {
        const T* src = xv.data() + (((bi * t + ti) * c + ci) * hw);
        for (std::size_t p = 0; p < hw; ++p) {
          out[((bi * hw + p) * c + ci) * t + ti] = src[p];
        }
      }
  auto xn = x.node();
  return Tensor<T>::make_op({b * hw, c, t}, std::move(out), {x},
                            [xn, b, t, c, hw](typename Tensor<T>::Node& self) {
                              if (!xn->requires_grad) return;
                              xn->grad.resize(xn->value.size(), T(0));
                              for (std::size_t bi = 0; bi < b; ++bi)
                                for (std::size_t ti = 0; ti < t; ++ti)
                                  for (std::size_t ci = 0; ci < c; ++ci) {
                                    T* dst = xn->grad.data() + (((bi * t + ti) * c + ci) * hw);
                                    for (std::size_t p = 0; p < hw; ++p) {
                                      dst[p] += self.grad[((bi * hw + p) * c + ci) * t + ti];
                                    }
                                  }
                            });
}

template <typename T>
Tensor<T> bct_to_video(const Tensor<T>& x, std::size_t b, std::size_t t, std::size_t c,
                       std::size_t h, std::size_t w) {
  if (x.rank() != 3 || x.dim(0) != b * h * w || x.dim(1) != c || x.dim(2) != t) {
    throw DimensionError("bct_to_video: shape mismatch");
  }
  const std::size_t hw = h * w;
  std::vector<T> out(x.size());
  const auto xv = x.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ti = 0; ti < t; ++ti)
      for (std::size_t ci = 0; ci < c; ++ci) {
        T* dst = out.data() + (((bi * t + ti) * c + ci) * hw);
        for (std::size_t p = 0; p < hw; ++p) {
          dst[p] = xv[((bi * hw + p) * c + ci) * t + ti];
        }
      }
  auto xn = x.node();
  return Tensor<T>::make_op({b, t, c, h, w}, std::move(out), {x},
                            [xn, b, t, c, hw](typename Tensor<T>::Node& self) {
                              if (!xn->requires_grad) return;
                              xn->grad.resize(xn->value.size(), T(0));
                              for (std::size_t bi = 0; bi < b; ++bi)
                                for (std::size_t ti = 0; ti < t; ++ti)
                                  for (std::size_t ci = 0; ci < c; ++ci) {
                                    const T* src =
                                        self.grad.data() + (((bi * t + ti) * c + ci) * hw);
                                    for (std::size_t p = 0; p < hw; ++p) {
                                      xn->grad[((bi * hw + p) * c + ci) * t + ti] += src[p];
                                    }
                                  }
                            });
}

// Depthwise temporal convolution over the time axis of (B, S, C, H, W)
// features, per channel and spatial location.
template <typename T>
Tensor<T> temporal_conv_inject(const Tensor<T>& features, const Conv1dTemporal<T>& layer) {
  if (features.rank() != 5) {
    throw DimensionError("temporal_conv_inject: features must be BxTxCxHxW, got " +
                         shape_str(features.shape()));
  }
  const std::size_t b = features.dim(0), t = features.dim(1), c = features.dim(2),
                    h = features.dim(3), w = features.dim(4);
  Tensor<T> bct = video_to_bct(features);
  Tensor<T> conv = conv1d_temporal_forward(layer, bct);
  return bct_to_video(conv, b, t, c, h, w);
}

template <typename T>
class StMultiplierModel {
 public:
  StMultiplierModel(const StMultiplierConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    Rng rng(hash_combine(seed, std::string("st-multiplier")));
    const std::size_t motion_in =
        2 * static_cast<std::size_t>(cfg.flow_fields) / static_cast<std::size_t>(cfg.frames);

    stem_a_ = make_conv2d<T>(3, cfg.stem_channels, 7, 2, 3, false, rng);
    stem_a_bn_ = make_batchnorm<T>(cfg.stem_channels);
    stem_m_ = make_conv2d<T>(motion_in, cfg.stem_channels, 7, 2, 3, false, rng);
    stem_m_bn_ = make_batchnorm<T>(cfg.stem_channels);

    std::size_t cin = cfg.stem_channels;
    for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
      const std::size_t cout = cfg.stage_channels[s];
      std::vector<StBlockParams<T>> stage;
      for (std::size_t bidx = 0; bidx < cfg.stage_blocks[s]; ++bidx) {
        const std::size_t stride = (bidx == 0 && s > 0) ? 2 : 1;
        stage.emplace_back(cin, cout, stride, rng);
        cin = cout;
      }
      stages_.push_back(std::move(stage));
    }
    for (int place : cfg.temporal_after_stages) {
      const std::size_t ch = cfg.stage_channels[static_cast<std::size_t>(place - 1)];
      temporal_a_.emplace(place, make_conv1d_temporal<T>(ch, cfg.temporal_kernel, rng));
      temporal_m_.emplace(place, make_conv1d_temporal<T>(ch, cfg.temporal_kernel, rng));
    }
    head_ = make_linear<T>(2 * cfg.stage_channels.back(), 3, rng);

    reg_.add_conv("stem.a", stem_a_);
    reg_.add_bn("stem.a_bn", stem_a_bn_);
    reg_.add_conv("stem.m", stem_m_);
    reg_.add_bn("stem.m_bn", stem_m_bn_);
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      for (std::size_t bidx = 0; bidx < stages_[s].size(); ++bidx) {
        stages_[s][bidx].register_params(
            reg_, "stage" + std::to_string(s + 1) + ".block" + std::to_string(bidx + 1));
      }
    }
    for (auto& [place, layer] : temporal_a_) {
      reg_.add_temporal("temporal" + std::to_string(place) + ".a", layer);
    }
    for (auto& [place, layer] : temporal_m_) {
      reg_.add_temporal("temporal" + std::to_string(place) + ".m", layer);
    }
    reg_.add_linear("head", head_);
  }

  const StMultiplierConfig& config() const { return cfg_; }
  ParamRegistry<T>& registry() { return reg_; }
  const ParamRegistry<T>& registry() const { return reg_; }

  // appearance: (B, T_s, 3, S, S); flow_stack: (B, L, 2, S, S). The flow
  // fields are regrouped into T_s time steps of 2L/T_s channels each.
  Tensor<T> forward_logits(const Tensor<T>& appearance, const Tensor<T>& flow_stack,
                           bool training) {
    const auto s = static_cast<std::size_t>(cfg_.input_size);
    const auto ts = static_cast<std::size_t>(cfg_.frames);
    const auto l = static_cast<std::size_t>(cfg_.flow_fields);
    if (appearance.rank() != 5 || appearance.dim(1) != ts || appearance.dim(2) != 3 ||
        appearance.dim(3) != s || appearance.dim(4) != s) {
      throw DimensionError("st-multiplier: appearance must be BxT_sx3xSxS, got " +
                           shape_str(appearance.shape()));
    }
    if (flow_stack.rank() != 5 || flow_stack.dim(1) != l || flow_stack.dim(2) != 2 ||
        flow_stack.dim(3) != s || flow_stack.dim(4) != s) {
      throw DimensionError("st-multiplier: flow stack must be BxLx2xSxS, got " +
                           shape_str(flow_stack.shape()));
    }
    if (appearance.dim(0) != flow_stack.dim(0)) {
      throw DimensionError("st-multiplier: appearance and flow batches differ");
    }
    const std::size_t batch = appearance.dim(0);
    const std::size_t motion_ch = 2 * l / ts;

    // time folds into the batch axis for all spatial processing
    Tensor<T> xa = reshape(appearance, {batch * ts, 3, s, s});
    Tensor<T> xm = reshape(flow_stack, {batch * ts, motion_ch, s, s});

    xa = max_pool2d(relu(batchnorm_forward(stem_a_bn_, conv2d_forward(stem_a_, xa), training)),
                    3, 2, 1);
    xm = max_pool2d(relu(batchnorm_forward(stem_m_bn_, conv2d_forward(stem_m_, xm), training)),
                    3, 2, 1);

    for (std::size_t st = 0; st < stages_.size(); ++st) {
      for (auto& block : stages_[st]) {
        auto [a_next, m_next] = st_block_forward(block, xa, xm, training);
        xa = std::move(a_next);
        xm = std::move(m_next);
      }
      const int place = static_cast<int>(st) + 1;
      if (auto it_a = temporal_a_.find(place); it_a != temporal_a_.end()) {
        xa = apply_temporal(xa, it_a->second, batch, ts, training);
        xm = apply_temporal(xm, temporal_m_.at(place), batch, ts, training);
      }
    }

    xa = relu(xa);  // last residual sum is pre-activation
    xm = relu(xm);
    Tensor<T> pa = global_avg_pool(xa);  // (B*T_s, C)
    Tensor<T> pm = global_avg_pool(xm);
    pa = mean_segments(reshape(pa, {batch, ts, pa.dim(1)}));  // (B, C)
    pm = mean_segments(reshape(pm, {batch, ts, pm.dim(1)}));
    return linear_forward(head_, concat_features(pa, pm));
  }

  SoftmaxLoss<T> forward_loss(const Tensor<T>& appearance, const Tensor<T>& flow_stack,
                              const std::vector<int>& targets) {
    return softmax_cross_entropy(forward_logits(appearance, flow_stack, true), targets);
  }

  Tensor<T> forward_probs(const Tensor<T>& appearance, const Tensor<T>& flow_stack) {
    NoGradGuard ng;
    return softmax_rows(forward_logits(appearance, flow_stack, false));
  }

 private:
  Tensor<T> apply_temporal(const Tensor<T>& x, const Conv1dTemporal<T>& layer, std::size_t batch,
                           std::size_t ts, bool training) {
    (void)training;
    const std::size_t c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> video = reshape(x, {batch, ts, c, h, w});
    Tensor<T> out = temporal_conv_inject(video, layer);
    return reshape(out, {batch * ts, c, h, w});
  }

  StMultiplierConfig cfg_;
  Conv2d<T> stem_a_, stem_m_;
  BatchNorm<T> stem_a_bn_, stem_m_bn_;
  std::vector<std::vector<StBlockParams<T>>> stages_;
  std::map<int, Conv1dTemporal<T>> temporal_a_;
  std::map<int, Conv1dTemporal<T>> temporal_m_;
  Linear<T> head_;
  ParamRegistry<T> reg_;
};

// ---------------------------------------------------------------------------
// Prediction and checkpointing
// ---------------------------------------------------------------------------

// Argmax per row; exact ties resolve to the lowest class index.
inline std::vector<ManeuverClass> predict(const Tensor<float>& probabilities) {
  if (probabilities.rank() != 2 || probabilities.dim(1) != 3) {
    throw DimensionError("predict: need Bx3 probabilities, got " +
                         shape_str(probabilities.shape()));
  }
  std::vector<ManeuverClass> out(probabilities.dim(0));
  const auto p = probabilities.data();
  for (std::size_t b = 0; b < out.size(); ++b) {
    int best = 0;
    for (int k = 1; k < 3; ++k) {
      if (p[b * 3 + k] > p[b * 3 + best]) best = k;
    }
    out[b] = static_cast<ManeuverClass>(best);
  }
  return out;
}

template <typename T>
std::vector<CheckpointEntry> registry_to_entries(const ParamRegistry<T>& reg) {
  std::vector<CheckpointEntry> entries;
  for (const auto& e : reg.entries()) {
    std::vector<float> data(e.tensor.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      data[i] = static_cast<float>(e.tensor.data()[i]);
    }
    entries.push_back({e.name, e.kind, Tensor<float>(e.tensor.shape(), std::move(data))});
  }
  return entries;
}

template <typename T>
void load_entries_into_registry(ParamRegistry<T>& reg, const std::vector<CheckpointEntry>& entries) {
  if (entries.size() != reg.entries().size()) {
    throw ValidationError("checkpoint does not match model: " + std::to_string(entries.size()) +
                          " tensors vs " + std::to_string(reg.entries().size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& src = entries[i];
    const auto& dst = reg.entries()[i];
    if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape()) {
      throw ValidationError("checkpoint tensor " + src.name + " does not match model tensor " +
                            dst.name);
    }
    auto out = const_cast<Tensor<T>&>(dst.tensor).data();
    for (std::size_t j = 0; j < out.size(); ++j) {
      out[j] = static_cast<T>(src.tensor.data()[j]);
    }
  }
}

}  // namespace lanecast
