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

#include <functional>
#include <vector>

#include "lanecast/tensor.hpp"

namespace lanecast_test {

using lanecast::NoGradGuard;
using lanecast::Rng;
using lanecast::Shape;
using lanecast::Tensor;

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                                    bool requires_grad = true) {
  std::vector<double> data(lanecast::numel(shape));
  for (double& v : data) v = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(data), requires_grad);
}

// Central finite differences against the recorded reverse-mode gradient.
// `loss_fn` must recompute the scalar loss from the live parameter values.
// Relative error uses max(1, |a|, |b|) as the denominator so near-zero
// gradients are compared absolutely.
inline double max_grad_rel_error(std::vector<Tensor<double>> params,
                                 const std::function<Tensor<double>()>& loss_fn,
                                 double step = 1e-4) {
  Tensor<double> loss = loss_fn();
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    analytic.emplace_back(p.grad().begin(), p.grad().end());
  }

  double worst = 0.0;
  {
    NoGradGuard ng;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      auto values = params[pi].data();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + step;
        const double up = loss_fn().item();
        values[i] = saved - step;
        const double down = loss_fn().item();
        values[i] = saved;
        const double fd = (up - down) / (2.0 * step);
        const double ad = analytic[pi][i];
        const double denom = std::max({1.0, std::abs(fd), std::abs(ad)});
        worst = std::max(worst, std::abs(fd - ad) / denom);
      }
    }
  }
  for (auto& p : params) p.zero_grad();
  return worst;
}

// Fixed random projection turning a tensor-valued function into a scalar one.
inline Tensor<double> project_to_scalar(const Tensor<double>& value, const Tensor<double>& proj) {
  return lanecast::sum(lanecast::mul(value, proj));
}

}  // namespace lanecast_test
