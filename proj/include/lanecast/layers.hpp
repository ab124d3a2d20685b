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

// Layer primitives for both network architectures: 2-D convolution, depthwise
// 1-D temporal convolution, fully connected, batch normalization, max
// pooling, and softmax cross-entropy. Dense inner products go through Eigen;
// batch items are processed in parallel with per-item weight-gradient
// partials reduced in item order, so results do not depend on thread count.

#pragma once

#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE
#endif
#include <Eigen/Core>

#include <cstdint>
#include <limits>
#include <variant>

#include "lanecast/tensor.hpp"

namespace lanecast {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

template <typename T>
std::vector<T>& scratch_buffer() {
  thread_local std::vector<T> buf;
  return buf;
}

inline std::size_t conv_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t pad, const char* axis) {
  const std::size_t padded = in + 2 * pad;
  if (padded < kernel) {
    throw DimensionError(std::string("conv: ") + axis + " extent " + std::to_string(in) +
                         " smaller than kernel " + std::to_string(kernel));
  }
  return (padded - kernel) / stride + 1;
}

// Patch matrix (Cin*kh*kw) x (Ho*Wo) for one image, zero outside the input.
template <typename T>
void im2col(const T* x, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo,
            T* cols) {
  const std::size_t patch = ho * wo;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* row = cols + ((ci * kh + ky) * kw + kx) * patch;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill_n(row + oy * wo, wo, T(0));
            continue;
          }
          const T* src = x + (ci * h + iy) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            row[oy * wo + ox] =
                (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_accumulate(const T* cols, std::size_t cin, std::size_t h, std::size_t w,
                       std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad,
                       std::size_t ho, std::size_t wo, T* dx) {
  const std::size_t patch = ho * wo;
  for (std::size_t ci = 0; ci < cin; ++ci) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* row = cols + ((ci * kh + ky) * kw + kx) * patch;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* dst = dx + (ci * h + iy) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) dst[ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

template <typename T>
void check_finite_input(const Tensor<T>& x, const char* op) {
  if (!all_finite(x.data())) {
    throw NumericError(std::string(op) + ": non-finite input");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Layer parameter records
// ---------------------------------------------------------------------------

template <typename T>
struct Conv2d {
  Tensor<T> weight;  // (Cout, Cin, kh, kw)
  Tensor<T> bias;    // (Cout), undefined when the conv feeds a batchnorm
  std::size_t stride = 1;
  std::size_t pad = 0;
};

template <typename T>
struct Conv1dTemporal {
  Tensor<T> weight;  // (C, k), depthwise over the time axis
  Tensor<T> bias;    // (C)
  bool same_padding = true;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // (Out, In)
  Tensor<T> bias;    // (Out)
};

template <typename T>
struct BatchNorm {
  Tensor<T> gamma;         // (C)
  Tensor<T> beta;          // (C)
  Tensor<T> running_mean;  // (C), state, not a parameter
  Tensor<T> running_var;   // (C), state, > 0
  T momentum = T(0.1);
  T eps = T(1e-5);
};

template <typename T>
using LayerParams = std::variant<Conv2d<T>, Conv1dTemporal<T>, Linear<T>, BatchNorm<T>>;

// Kaiming fan-in initialization; batchnorm starts as the identity transform.

template <typename T>
Tensor<T> kaiming_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  std::vector<T> w(numel(shape));
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (T& v : w) v = static_cast<T>(rng.normal(0.0, stddev));
  return Tensor<T>(std::move(shape), std::move(w), true);
}

template <typename T>
Conv2d<T> make_conv2d(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride,
                      std::size_t pad, bool with_bias, Rng& rng) {
  if (kernel == 0 || stride == 0) throw ConfigError("conv2d: kernel and stride must be positive");
  Conv2d<T> layer;
  layer.weight = kaiming_normal<T>({cout, cin, kernel, kernel}, cin * kernel * kernel, rng);
  if (with_bias) layer.bias = Tensor<T>::zeros({cout}, true);
  layer.stride = stride;
  layer.pad = pad;
  return layer;
}

template <typename T>
Conv1dTemporal<T> make_conv1d_temporal(std::size_t channels, std::size_t kernel, Rng& rng) {
  if (kernel % 2 == 0) throw ConfigError("conv1d-temporal: kernel must be odd");
  Conv1dTemporal<T> layer;
  layer.weight = kaiming_normal<T>({channels, kernel}, kernel, rng);
  layer.bias = Tensor<T>::zeros({channels}, true);
  return layer;
}

template <typename T>
Linear<T> make_linear(std::size_t fin, std::size_t fout, Rng& rng) {
  Linear<T> layer;
  layer.weight = kaiming_normal<T>({fout, fin}, fin, rng);
  layer.bias = Tensor<T>::zeros({fout}, true);
  return layer;
}

template <typename T>
BatchNorm<T> make_batchnorm(std::size_t channels, T momentum = T(0.1), T eps = T(1e-5)) {
  BatchNorm<T> layer;
  layer.gamma = Tensor<T>::ones({channels}, true);
  layer.beta = Tensor<T>::zeros({channels}, true);
  layer.running_mean = Tensor<T>::zeros({channels});
  layer.running_var = Tensor<T>::ones({channels});
  layer.momentum = momentum;
  layer.eps = eps;
  return layer;
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d_forward(const Conv2d<T>& layer, const Tensor<T>& x) {
  detail::check_finite_input(x, "conv2d");
  if (x.rank() != 4) {
    throw DimensionError("conv2d: input must be BxCxHxW, got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = layer.weight.dim(0), kh = layer.weight.dim(2),
                    kw = layer.weight.dim(3);
  if (layer.weight.dim(1) != cin) {
    throw DimensionError("conv2d: input axis 1 has " + std::to_string(cin) +
                         " channels, weights expect " + std::to_string(layer.weight.dim(1)));
  }
  const std::size_t ho = detail::conv_extent(h, kh, layer.stride, layer.pad, "axis 2 (height)");
  const std::size_t wo = detail::conv_extent(w, kw, layer.stride, layer.pad, "axis 3 (width)");
  const std::size_t k = cin * kh * kw, patch = ho * wo;
  const std::size_t stride = layer.stride, pad = layer.pad;

  std::vector<T> out(batch * cout * patch);
  const T* xv = x.data().data();
  const T* wv = layer.weight.data().data();
  const bool has_bias = layer.bias.defined();
  const T* bv = has_bias ? layer.bias.data().data() : nullptr;

  parallel_for(batch, [&](std::size_t b0, std::size_t b1) {
    auto& cols = detail::scratch_buffer<T>();
    if (cols.size() < k * patch) cols.resize(k * patch);
    ConstMatMap<T> wm(wv, cout, k);
    for (std::size_t b = b0; b < b1; ++b) {
      detail::im2col(xv + b * cin * h * w, cin, h, w, kh, kw, stride, pad, ho, wo, cols.data());
      ConstMatMap<T> cm(cols.data(), k, patch);
      MatMap<T> ym(out.data() + b * cout * patch, cout, patch);
      ym.noalias() = wm * cm;
      if (has_bias) {
        for (std::size_t co = 0; co < cout; ++co) ym.row(co).array() += bv[co];
      }
    }
  });

  auto xn = x.node();
  auto wn = layer.weight.node();
  auto bn = has_bias ? layer.bias.node() : nullptr;
  std::vector<Tensor<T>> inputs{x, layer.weight};
  if (has_bias) inputs.push_back(layer.bias);

  auto backward = [xn, wn, bn, batch, cin, h, w, cout, kh, kw, stride, pad, ho,
                   wo](typename Tensor<T>::Node& self) {
    const std::size_t k = cin * kh * kw, patch = ho * wo;
    const T* dy = self.grad.data();
    const bool need_dx = xn->requires_grad;
    const bool need_dw = wn->requires_grad;
    const bool need_db = bn && bn->requires_grad;
    if (need_dx) xn->grad.resize(xn->value.size(), T(0));
    // Per-item weight gradient partials, reduced in item order below.
    std::vector<T> dw_parts;
    std::vector<T> db_parts;
    if (need_dw) dw_parts.assign(batch * cout * k, T(0));
    if (need_db) db_parts.assign(batch * cout, T(0));

    parallel_for(batch, [&](std::size_t b0, std::size_t b1) {
      auto& scratch = detail::scratch_buffer<T>();
      const std::size_t cols_sz = k * patch;
      if (scratch.size() < 2 * cols_sz) scratch.resize(2 * cols_sz);
      T* cols = scratch.data();
      T* dcols = scratch.data() + cols_sz;
      ConstMatMap<T> wm(wn->value.data(), cout, k);
      for (std::size_t b = b0; b < b1; ++b) {
        ConstMatMap<T> dym(dy + b * cout * patch, cout, patch);
        if (need_dw) {
          detail::im2col(xn->value.data() + b * cin * h * w, cin, h, w, kh, kw, stride, pad, ho,
                         wo, cols);
          ConstMatMap<T> cm(cols, k, patch);
          MatMap<T> dwm(dw_parts.data() + b * cout * k, cout, k);
          dwm.noalias() = dym * cm.transpose();
        }
        if (need_db) {
          // fixed-order scalar sum; SIMD redux splits depend on heap alignment
          const T* dyb = dy + b * cout * patch;
          for (std::size_t co = 0; co < cout; ++co) {
            T acc = T(0);
            for (std::size_t p = 0; p < patch; ++p) acc += dyb[co * patch + p];
            db_parts[b * cout + co] = acc;
          }
        }
        if (need_dx) {
          MatMap<T> dcm(dcols, k, patch);
          dcm.noalias() = wm.transpose() * dym;
          detail::col2im_accumulate(dcols, cin, h, w, kh, kw, stride, pad, ho, wo,
                                    xn->grad.data() + b * cin * h * w);
        }
      }
    });

    if (need_dw) {
      wn->grad.resize(wn->value.size(), T(0));
      for (std::size_t b = 0; b < batch; ++b) {
        const T* part = dw_parts.data() + b * cout * k;
        for (std::size_t i = 0; i < cout * k; ++i) wn->grad[i] += part[i];
      }
    }
    if (need_db) {
      bn->grad.resize(bn->value.size(), T(0));
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t co = 0; co < cout; ++co) bn->grad[co] += db_parts[b * cout + co];
    }
  };

  return Tensor<T>::make_op({batch, cout, ho, wo}, std::move(out), std::move(inputs),
                            std::move(backward));
}

// ---------------------------------------------------------------------------
// depthwise temporal conv, input (B, C, T)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv1d_temporal_forward(const Conv1dTemporal<T>& layer, const Tensor<T>& x) {
  detail::check_finite_input(x, "conv1d-temporal");
  if (x.rank() != 3) {
    throw DimensionError("conv1d-temporal: input must be BxCxT, got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), c = x.dim(1), t = x.dim(2);
  const std::size_t k = layer.weight.dim(1);
  if (layer.weight.dim(0) != c) {
    throw DimensionError("conv1d-temporal: input axis 1 has " + std::to_string(c) +
                         " channels, weights expect " + std::to_string(layer.weight.dim(0)));
  }
  if (!layer.same_padding && t < k) {
    throw DimensionError("conv1d-temporal: axis 2 extent " + std::to_string(t) +
                         " smaller than kernel " + std::to_string(k) + " without padding");
  }
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t to = layer.same_padding ? t : t - k + 1;

  std::vector<T> out(batch * c * to);
  const T* xv = x.data().data();
  const T* wv = layer.weight.data().data();
  const T* bv = layer.bias.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* xin = xv + (b * c + ch) * t;
      const T* wk = wv + ch * k;
      T* y = out.data() + (b * c + ch) * to;
      for (std::size_t ot = 0; ot < to; ++ot) {
        T acc = bv[ch];
        for (std::size_t kk = 0; kk < k; ++kk) {
          const std::ptrdiff_t it = layer.same_padding
                                        ? static_cast<std::ptrdiff_t>(ot + kk) - half
                                        : static_cast<std::ptrdiff_t>(ot + kk);
          if (it >= 0 && it < static_cast<std::ptrdiff_t>(t)) acc += wk[kk] * xin[it];
        }
        y[ot] = acc;
      }
    }
  }

  auto xn = x.node();
  auto wn = layer.weight.node();
  auto bn = layer.bias.node();
  const bool same = layer.same_padding;
  auto backward = [xn, wn, bn, batch, c, t, k, to, half, same](typename Tensor<T>::Node& self) {
    const T* dy = self.grad.data();
    if (xn->requires_grad) xn->grad.resize(xn->value.size(), T(0));
    if (wn->requires_grad) wn->grad.resize(wn->value.size(), T(0));
    if (bn->requires_grad) bn->grad.resize(bn->value.size(), T(0));
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* xin = xn->value.data() + (b * c + ch) * t;
        const T* wk = wn->value.data() + ch * k;
        const T* dyr = dy + (b * c + ch) * to;
        for (std::size_t ot = 0; ot < to; ++ot) {
          const T g = dyr[ot];
          if (bn->requires_grad) bn->grad[ch] += g;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const std::ptrdiff_t it = same ? static_cast<std::ptrdiff_t>(ot + kk) - half
                                           : static_cast<std::ptrdiff_t>(ot + kk);
            if (it < 0 || it >= static_cast<std::ptrdiff_t>(t)) continue;
            if (wn->requires_grad) wn->grad[ch * k + kk] += g * xin[it];
            if (xn->requires_grad) xn->grad[(b * c + ch) * t + it] += g * wk[kk];
          }
        }
      }
    }
  };

  return Tensor<T>::make_op({batch, c, to}, std::move(out), {x, layer.weight, layer.bias},
                            std::move(backward));
}

// ---------------------------------------------------------------------------
// linear, input (B, F)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear_forward(const Linear<T>& layer, const Tensor<T>& x) {
  detail::check_finite_input(x, "linear");
  if (x.rank() != 2) {
    throw DimensionError("linear: input must be BxF, got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), fin = x.dim(1);
  const std::size_t fout = layer.weight.dim(0);
  if (layer.weight.dim(1) != fin) {
    throw DimensionError("linear: input axis 1 has " + std::to_string(fin) +
                         " features, weights expect " + std::to_string(layer.weight.dim(1)));
  }
  std::vector<T> out(batch * fout);
  {
    ConstMatMap<T> xm(x.data().data(), batch, fin);
    ConstMatMap<T> wm(layer.weight.data().data(), fout, fin);
    MatMap<T> ym(out.data(), batch, fout);
    ym.noalias() = xm * wm.transpose();
    const T* bv = layer.bias.data().data();
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t cidx = 0; cidx < fout; ++cidx) out[r * fout + cidx] += bv[cidx];
  }

  auto xn = x.node();
  auto wn = layer.weight.node();
  auto bn = layer.bias.node();
  auto backward = [xn, wn, bn, batch, fin, fout](typename Tensor<T>::Node& self) {
    ConstMatMap<T> dym(self.grad.data(), batch, fout);
    if (xn->requires_grad) {
      xn->grad.resize(xn->value.size(), T(0));
      MatMap<T> dxm(xn->grad.data(), batch, fin);
      ConstMatMap<T> wm(wn->value.data(), fout, fin);
      dxm.noalias() += dym * wm;
    }
    if (wn->requires_grad) {
      wn->grad.resize(wn->value.size(), T(0));
      MatMap<T> dwm(wn->grad.data(), fout, fin);
      ConstMatMap<T> xm(xn->value.data(), batch, fin);
      dwm.noalias() += dym.transpose() * xm;
    }
    if (bn->requires_grad) {
      bn->grad.resize(bn->value.size(), T(0));
      for (std::size_t r = 0; r < batch; ++r)
        for (std::size_t cidx = 0; cidx < fout; ++cidx)
          bn->grad[cidx] += self.grad[r * fout + cidx];
    }
  };
  return Tensor<T>::make_op({batch, fout}, std::move(out), {x, layer.weight, layer.bias},
                            std::move(backward));
}

// ---------------------------------------------------------------------------
// batch normalization over axis 1, input rank >= 2
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> batchnorm_forward(BatchNorm<T>& layer, const Tensor<T>& x, bool training) {
  detail::check_finite_input(x, "batchnorm");
  if (x.rank() < 2) {
    throw DimensionError("batchnorm: input rank must be >= 2, got " + shape_str(x.shape()));
  }
  const std::size_t c = x.dim(1);
  if (layer.gamma.size() != c) {
    throw DimensionError("batchnorm: input axis 1 has " + std::to_string(c) +
                         " channels, params expect " + std::to_string(layer.gamma.size()));
  }
  const std::size_t batch = x.dim(0);
  std::size_t inner = 1;
  for (std::size_t a = 2; a < x.rank(); ++a) inner *= x.dim(a);
  const std::size_t per_channel = batch * inner;

  const T* xv = x.data().data();
  std::vector<T> mean(c, T(0)), var(c, T(0));
  if (training) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* p = xv + (b * c + ch) * inner;
        T acc = T(0);
        for (std::size_t i = 0; i < inner; ++i) acc += p[i];
        mean[ch] += acc;
      }
    for (std::size_t ch = 0; ch < c; ++ch) mean[ch] /= static_cast<T>(per_channel);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* p = xv + (b * c + ch) * inner;
        T acc = T(0);
        for (std::size_t i = 0; i < inner; ++i) {
          const T d = p[i] - mean[ch];
          acc += d * d;
        }
        var[ch] += acc;
      }
    for (std::size_t ch = 0; ch < c; ++ch) var[ch] /= static_cast<T>(per_channel);
    // Exponential running stats; biased variance keeps running_var > 0.
    auto rm = layer.running_mean.data();
    auto rv = layer.running_var.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      rm[ch] = (T(1) - layer.momentum) * rm[ch] + layer.momentum * mean[ch];
      rv[ch] = (T(1) - layer.momentum) * rv[ch] + layer.momentum * var[ch];
    }
  } else {
    std::copy_n(layer.running_mean.data().begin(), c, mean.begin());
    std::copy_n(layer.running_var.data().begin(), c, var.begin());
  }

  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = T(1) / std::sqrt(var[ch] + layer.eps);

  std::vector<T> out(x.size());
  const T* gv = layer.gamma.data().data();
  const T* bev = layer.beta.data().data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* p = xv + (b * c + ch) * inner;
      T* y = out.data() + (b * c + ch) * inner;
      const T m = mean[ch], is = inv_std[ch], g = gv[ch], be = bev[ch];
      for (std::size_t i = 0; i < inner; ++i) y[i] = (p[i] - m) * is * g + be;
    }

  auto xn = x.node();
  auto gn = layer.gamma.node();
  auto betan = layer.beta.node();
  auto backward = [xn, gn, betan, batch, c, inner, mean, inv_std,
                   training](typename Tensor<T>::Node& self) {
    const std::size_t n = batch * inner;
    const T* dy = self.grad.data();
    const T* xv = xn->value.data();
    std::vector<T> sum_dy(c, T(0)), sum_dy_xhat(c, T(0));
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* p = xv + (b * c + ch) * inner;
        const T* g = dy + (b * c + ch) * inner;
        T a0 = T(0), a1 = T(0);
        for (std::size_t i = 0; i < inner; ++i) {
          a0 += g[i];
          a1 += g[i] * (p[i] - mean[ch]) * inv_std[ch];
        }
        sum_dy[ch] += a0;
        sum_dy_xhat[ch] += a1;
      }
    if (gn->requires_grad) {
      gn->grad.resize(gn->value.size(), T(0));
      for (std::size_t ch = 0; ch < c; ++ch) gn->grad[ch] += sum_dy_xhat[ch];
    }
    if (betan->requires_grad) {
      betan->grad.resize(betan->value.size(), T(0));
      for (std::size_t ch = 0; ch < c; ++ch) betan->grad[ch] += sum_dy[ch];
    }
    if (!xn->requires_grad) return;
    xn->grad.resize(xn->value.size(), T(0));
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* p = xv + (b * c + ch) * inner;
        const T* g = dy + (b * c + ch) * inner;
        T* dx = xn->grad.data() + (b * c + ch) * inner;
        const T gamma = gn->value[ch], is = inv_std[ch], m = mean[ch];
        if (training) {
          const T invn = T(1) / static_cast<T>(n);
          for (std::size_t i = 0; i < inner; ++i) {
            const T xhat = (p[i] - m) * is;
            dx[i] += gamma * is *
                     (g[i] - invn * sum_dy[ch] - xhat * invn * sum_dy_xhat[ch]);
          }
        } else {
          for (std::size_t i = 0; i < inner; ++i) dx[i] += gamma * is * g[i];
        }
      }
  };

  return Tensor<T>::make_op(x.shape(), std::move(out), {x, layer.gamma, layer.beta},
                            std::move(backward));
}

// Alias matching the normalization-statistics contract.
template <typename T>
Tensor<T> batchnorm_stats(BatchNorm<T>& layer, const Tensor<T>& x, bool training) {
  return batchnorm_forward(layer, x, training);
}

// ---------------------------------------------------------------------------
// max pooling, input (B, C, H, W); out-of-bounds positions are excluded
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel = 3, std::size_t stride = 2,
                     std::size_t pad = 0) {
  detail::check_finite_input(x, "max_pool2d");
  if (x.rank() != 4) {
    throw DimensionError("max_pool2d: input must be BxCxHxW, got " + shape_str(x.shape()));
  }
  if (pad >= kernel) throw ConfigError("max_pool2d: pad must be smaller than kernel");
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = detail::conv_extent(h, kernel, stride, pad, "axis 2 (height)");
  const std::size_t wo = detail::conv_extent(w, kernel, stride, pad, "axis 3 (width)");

  std::vector<T> out(batch * c * ho * wo);
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
  const T* xv = x.data().data();
  for (std::size_t bc = 0; bc < batch * c; ++bc) {
    const T* plane = xv + bc * h * w;
    T* y = out.data() + bc * ho * wo;
    std::uint32_t* am = argmax->data() + bc * ho * wo;
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::uint32_t best_idx = 0;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const T v = plane[iy * w + ix];
            if (v > best) {
              best = v;
              best_idx = static_cast<std::uint32_t>(iy * w + ix);
            }
          }
        }
        y[oy * wo + ox] = best;
        am[oy * wo + ox] = best_idx;
      }
    }
  }

  auto xn = x.node();
  auto backward = [xn, argmax, batch, c, h, w, ho, wo](typename Tensor<T>::Node& self) {
    if (!xn->requires_grad) return;
    xn->grad.resize(xn->value.size(), T(0));
    for (std::size_t bc = 0; bc < batch * c; ++bc) {
      const T* g = self.grad.data() + bc * ho * wo;
      const std::uint32_t* am = argmax->data() + bc * ho * wo;
      T* dx = xn->grad.data() + bc * h * w;
      for (std::size_t i = 0; i < ho * wo; ++i) dx[am[i]] += g[i];
    }
  };
  return Tensor<T>::make_op({batch, c, ho, wo}, std::move(out), {x}, std::move(backward));
}

// ---------------------------------------------------------------------------
// softmax cross-entropy, logits (B, K)
// ---------------------------------------------------------------------------

template <typename T>
struct SoftmaxLoss {
  Tensor<T> loss;   // scalar, attached to the graph
  Tensor<T> probs;  // (B, K), detached; rows sum to 1
};

template <typename T>
SoftmaxLoss<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& targets) {
  detail::check_finite_input(logits, "softmax_cross_entropy");
  if (logits.rank() != 2) {
    throw DimensionError("softmax_cross_entropy: logits must be BxK, got " +
                         shape_str(logits.shape()));
  }
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  if (targets.size() != batch) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for batch " + std::to_string(batch));
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= k) {
      throw LabelError("softmax_cross_entropy: target " + std::to_string(t) +
                       " outside [0, " + std::to_string(k) + ")");
    }
  }

  std::vector<T> probs(batch * k);
  const T* lv = logits.data().data();
  double loss_acc = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = lv + b * k;
    T mx = row[0];
    for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, row[i]);
    double denom = 0.0;
    for (std::size_t i = 0; i < k; ++i) denom += std::exp(static_cast<double>(row[i] - mx));
    const double log_denom = std::log(denom);
    for (std::size_t i = 0; i < k; ++i) {
      probs[b * k + i] = static_cast<T>(std::exp(static_cast<double>(row[i] - mx) - log_denom));
    }
    loss_acc -= static_cast<double>(row[targets[b]] - mx) - log_denom;
  }
  const T loss_value = static_cast<T>(loss_acc / static_cast<double>(batch));
  if (!std::isfinite(static_cast<double>(loss_value))) {
    throw NumericError("softmax_cross_entropy: non-finite loss");
  }

  auto ln = logits.node();
  auto probs_copy = std::make_shared<std::vector<T>>(probs);
  auto targets_copy = std::make_shared<std::vector<int>>(targets);
  auto backward = [ln, probs_copy, targets_copy, batch, k](typename Tensor<T>::Node& self) {
    if (!ln->requires_grad) return;
    ln->grad.resize(ln->value.size(), T(0));
    const T scale = self.grad[0] / static_cast<T>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < k; ++i) {
        T g = (*probs_copy)[b * k + i];
        if (static_cast<std::size_t>((*targets_copy)[b]) == i) g -= T(1);
        ln->grad[b * k + i] += scale * g;
      }
    }
  };

  SoftmaxLoss<T> result;
  result.loss = Tensor<T>::make_op({1}, {loss_value}, {logits}, std::move(backward));
  result.probs = Tensor<T>::from_raw({batch, k}, std::move(probs));
  return result;
}

// Plain softmax over rows, no graph. Used for fusion and reporting.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  if (logits.rank() != 2) {
    throw DimensionError("softmax_rows: need BxK, got " + shape_str(logits.shape()));
  }
  const std::size_t batch = logits.dim(0), k = logits.dim(1);
  std::vector<T> probs(batch * k);
  const T* lv = logits.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = lv + b * k;
    T mx = row[0];
    for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, row[i]);
    double denom = 0.0;
    for (std::size_t i = 0; i < k; ++i) denom += std::exp(static_cast<double>(row[i] - mx));
    for (std::size_t i = 0; i < k; ++i)
      probs[b * k + i] = static_cast<T>(std::exp(static_cast<double>(row[i] - mx)) / denom);
  }
  return Tensor<T>::from_raw({batch, k}, std::move(probs));
}

// ---------------------------------------------------------------------------
// Dispatch over the layer-kind record
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> forward(LayerParams<T>& layer, const Tensor<T>& input, bool training = true) {
  return std::visit(
      [&](auto& l) -> Tensor<T> {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, Conv2d<T>>) {
          return conv2d_forward(l, input);
        } else if constexpr (std::is_same_v<L, Conv1dTemporal<T>>) {
          return conv1d_temporal_forward(l, input);
        } else if constexpr (std::is_same_v<L, Linear<T>>) {
          return linear_forward(l, input);
        } else {
          return batchnorm_forward(l, input, training);
        }
      },
      layer);
}

}  // namespace lanecast
