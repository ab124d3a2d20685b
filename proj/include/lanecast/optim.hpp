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

#pragma once

#include "lanecast/tensor.hpp"

namespace lanecast {

// SGD with classical momentum:  v <- m*v - lr*g,  w <- w + v.
// Stepping clears gradients, which re-arms backward() for the next pass.
template <typename T>
class OptimizerState {
 public:
  OptimizerState(std::vector<Tensor<T>> params, T learning_rate, T momentum)
      : params_(std::move(params)), lr_(learning_rate), momentum_(momentum) {
    if (lr_ <= T(0)) throw ConfigError("sgd: learning rate must be positive");
    if (momentum_ < T(0) || momentum_ >= T(1)) throw ConfigError("sgd: momentum must be in [0,1)");
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p.size(), T(0));
  }

  std::vector<Tensor<T>>& params() { return params_; }
  T learning_rate() const { return lr_; }
  void set_learning_rate(T lr) {
    if (lr <= T(0)) throw ConfigError("sgd: learning rate must be positive");
    lr_ = lr;
  }
  T momentum() const { return momentum_; }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T>& p = params_[i];
      if (!p.grad_ready()) {
        throw ContractError("sgd_step: parameter " + std::to_string(i) +
                            " has no gradient; call backward() first");
      }
      auto w = p.data();
      auto g = p.grad();
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = momentum_ * v[j] - lr_ * g[j];
        w[j] += v[j];
      }
      require_finite<T>(w, "sgd_step: parameter update");
      p.zero_grad();
    }
  }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> velocity_;
  T lr_;
  T momentum_;
};

template <typename T>
void sgd_step(OptimizerState<T>& state) {
  state.step();
}

}  // namespace lanecast
