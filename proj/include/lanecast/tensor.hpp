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

// Dense n-d tensor with reverse-mode differentiation.
//
// A Tensor is a shared handle onto a node of the computation graph; copying a
// Tensor copies the handle, so parameters keep their identity across training
// steps. Operations record a backward closure on the result node when any
// input requires gradients; Tensor::backward() replays the closures in
// reverse topological order.
//
// Gradient policy: gradients of leaf tensors survive until an optimizer step
// (or zero_grad) clears them. Calling backward() a second time while a
// reachable leaf still holds a gradient throws ContractError.
//
// Finiteness policy: tensors built from external data are validated on
// construction. Interior operations do not re-scan their outputs on the hot
// path; the loss value and optimizer updates are checked instead, which is
// where any overflow or NaN produced inside a network surfaces.

#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "lanecast/common.hpp"

namespace lanecast {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<std::size_t>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Thread-local switch: while disabled, operations skip graph recording.
// Used for inference and finite-difference probes.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // sized lazily by backward()
    bool requires_grad = false;
    bool grad_ready = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Pulls this node's grad into the parents' grads. Captures `this`
    // non-owning; the node owns the closure.
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return parents.empty() && !backward_fn; }
  };
  using NodePtr = std::shared_ptr<Node>;

  Tensor() = default;

  // Validating constructor for data entering the library.
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor: shape " + shape_str(shape) + " does not cover " +
                           std::to_string(data.size()) + " values");
    }
    for (std::size_t ext : shape) {
      if (ext == 0) throw DimensionError("tensor: zero extent in shape " + shape_str(shape));
    }
    require_finite<T>(data, "tensor");
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_raw(std::move(shape), {}, requires_grad);
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    std::vector<T> data(numel(shape), fill);
    return from_raw(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(1), requires_grad);
  }

  // Unvalidated constructor for values produced inside the library.
  static Tensor from_raw(Shape shape, std::vector<T> data, bool requires_grad = false) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    if (data.empty()) data.assign(numel(shape), T(0));
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  std::span<T> data() { return node_->value; }
  T item() const {
    if (size() != 1) throw ContractError("item(): tensor is not scalar");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }
  bool grad_ready() const { return node_->grad_ready; }

  std::span<const T> grad() const {
    if (node_->grad.size() != node_->value.size()) {
      throw ContractError("grad(): gradient not populated");
    }
    return node_->grad;
  }

  void zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    node_->grad_ready = false;
  }

  // Detached copy of the current values (no graph, no grad requirement).
  Tensor detach_copy() const { return from_raw(node_->shape, node_->value, false); }

  NodePtr node() const { return node_; }

  // Reverse-mode sweep from a scalar. See gradient policy above.
  void backward() {
    if (!node_) throw ContractError("backward: undefined tensor");
    if (size() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(shape()));
    if (node_->is_leaf()) throw ContractError("backward: no operations recorded");

    std::vector<Node*> order;
    topo_sort(node_.get(), order);

    for (Node* n : order) {
      if (n->is_leaf() && n->requires_grad && n->grad_ready) {
        throw ContractError(
            "backward: gradient already populated; step the optimizer or zero_grad first");
      }
    }
    for (Node* n : order) {
      n->grad.assign(n->value.size(), T(0));
    }
    node_->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward_fn) n->backward_fn(*n);
    }
    for (Node* n : order) {
      if (n->is_leaf() && n->requires_grad) n->grad_ready = true;
    }
  }

  // --- graph construction helpers used by the operator library ------------

  static Tensor make_op(Shape shape, std::vector<T> value, std::vector<Tensor> inputs,
                        std::function<void(Node&)> backward_fn) {
    Tensor out = from_raw(std::move(shape), std::move(value), false);
    bool needs = false;
    if (grad_mode()) {
      for (const Tensor& in : inputs) {
        if (in.defined() && in.node_->requires_grad) needs = true;
      }
    }
    if (needs) {
      out.node_->requires_grad = true;
      out.node_->parents.reserve(inputs.size());
      for (const Tensor& in : inputs) out.node_->parents.push_back(in.node_);
      out.node_->backward_fn = std::move(backward_fn);
    }
    return out;
  }

 private:
  static void topo_sort(Node* root, std::vector<Node*>& order) {
    std::unordered_set<Node*> seen;
    // Iterative DFS; graphs from deep networks overflow the call stack
    // otherwise.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      if (idx < node->parents.size()) {
        Node* parent = node->parents[idx++].get();
        if (seen.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    // order now lists parents before children (post-order).
  }

  NodePtr node_;
};

// ---------------------------------------------------------------------------
// Elementwise / reduction operations needed by the model graphs.
// ---------------------------------------------------------------------------

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  std::vector<T> out(a.size());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto an = a.node();
  auto bn = b.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b},
                            [an, bn](typename Tensor<T>::Node& self) {
                              if (an->requires_grad) {
                                an->grad.resize(an->value.size(), T(0));
                                for (std::size_t i = 0; i < self.grad.size(); ++i)
                                  an->grad[i] += self.grad[i];
                              }
                              if (bn->requires_grad) {
                                bn->grad.resize(bn->value.size(), T(0));
                                for (std::size_t i = 0; i < self.grad.size(); ++i)
                                  bn->grad[i] += self.grad[i];
                              }
                            });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  std::vector<T> out(a.size());
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto an = a.node();
  auto bn = b.node();
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b},
                            [an, bn](typename Tensor<T>::Node& self) {
                              if (an->requires_grad) {
                                an->grad.resize(an->value.size(), T(0));
                                for (std::size_t i = 0; i < self.grad.size(); ++i)
                                  an->grad[i] += self.grad[i] * bn->value[i];
                              }
                              if (bn->requires_grad) {
                                bn->grad.resize(bn->value.size(), T(0));
                                for (std::size_t i = 0; i < self.grad.size(); ++i)
                                  bn->grad[i] += self.grad[i] * an->value[i];
                              }
                            });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  auto xn = x.node();
  return Tensor<T>::make_op(x.shape(), std::move(out), {x},
                            [xn](typename Tensor<T>::Node& self) {
                              if (!xn->requires_grad) return;
                              xn->grad.resize(xn->value.size(), T(0));
                              for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                if (xn->value[i] > T(0)) xn->grad[i] += self.grad[i];
                              }
                            });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (numel(new_shape) != x.size()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(new_shape) +
                         " changes element count");
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  auto xn = x.node();
  return Tensor<T>::make_op(std::move(new_shape), std::move(out), {x},
                            [xn](typename Tensor<T>::Node& self) {
                              if (!xn->requires_grad) return;
                              xn->grad.resize(xn->value.size(), T(0));
                              for (std::size_t i = 0; i < self.grad.size(); ++i)
                                xn->grad[i] += self.grad[i];
                            });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (const T v : x.data()) total += v;
  auto xn = x.node();
  return Tensor<T>::make_op({1}, {total}, {x},
                            [xn](typename Tensor<T>::Node& self) {
                              if (!xn->requires_grad) return;
                              xn->grad.resize(xn->value.size(), T(0));
                              const T g = self.grad[0];
                              for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
                            });
}

// (B, Ca) ++ (B, Cb) -> (B, Ca+Cb)
template <typename T>
Tensor<T> concat_features(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
    throw DimensionError("concat_features: need matching batch, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t batch = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  std::vector<T> out(batch * (ca + cb));
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t r = 0; r < batch; ++r) {
    std::copy_n(av.begin() + r * ca, ca, out.begin() + r * (ca + cb));
    std::copy_n(bv.begin() + r * cb, cb, out.begin() + r * (ca + cb) + ca);
  }
  auto an = a.node();
  auto bn = b.node();
  return Tensor<T>::make_op({batch, ca + cb}, std::move(out), {a, b},
                            [an, bn, batch, ca, cb](typename Tensor<T>::Node& self) {
                              if (an->requires_grad) {
                                an->grad.resize(an->value.size(), T(0));
                                for (std::size_t r = 0; r < batch; ++r)
                                  for (std::size_t c = 0; c < ca; ++c)
                                    an->grad[r * ca + c] += self.grad[r * (ca + cb) + c];
                              }
                              if (bn->requires_grad) {
                                bn->grad.resize(bn->value.size(), T(0));
                                for (std::size_t r = 0; r < batch; ++r)
                                  for (std::size_t c = 0; c < cb; ++c)
                                    bn->grad[r * cb + c] += self.grad[r * (ca + cb) + ca + c];
                              }
                            });
}

// (N, C, H, W) -> (N, C), mean over the spatial extent.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("global_avg_pool: need NCHW, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(n * c);
  const auto xv = x.data();
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc = T(0);
    const T* p = xv.data() + i * hw;
    for (std::size_t k = 0; k < hw; ++k) acc += p[k];
    out[i] = acc / static_cast<T>(hw);
  }
  auto xn = x.node();
  return Tensor<T>::make_op({n, c}, std::move(out), {x},
                            [xn, n, c, hw](typename Tensor<T>::Node& self) {
                              if (!xn->requires_grad) return;
                              xn->grad.resize(xn->value.size(), T(0));
                              const T inv = T(1) / static_cast<T>(hw);
                              for (std::size_t i = 0; i < n * c; ++i) {
                                const T g = self.grad[i] * inv;
                                T* p = xn->grad.data() + i * hw;
                                for (std::size_t k = 0; k < hw; ++k) p[k] += g;
                              }
                            });
}

// (B, S, C) -> (B, C), mean over the middle (time/segment) axis.
template <typename T>
Tensor<T> mean_segments(const Tensor<T>& x) {
  if (x.rank() != 3) throw DimensionError("mean_segments: need B,S,C, got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0), s = x.dim(1), c = x.dim(2);
  std::vector<T> out(b * c, T(0));
  const auto xv = x.data();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t t = 0; t < s; ++t)
      for (std::size_t k = 0; k < c; ++k) out[i * c + k] += xv[(i * s + t) * c + k];
  const T inv = T(1) / static_cast<T>(s);
  for (T& v : out) v *= inv;
  auto xn = x.node();
  return Tensor<T>::make_op({b, c}, std::move(out), {x},
                            [xn, b, s, c](typename Tensor<T>::Node& self) {
                              if (!xn->requires_grad) return;
                              xn->grad.resize(xn->value.size(), T(0));
                              const T inv = T(1) / static_cast<T>(s);
                              for (std::size_t i = 0; i < b; ++i)
                                for (std::size_t t = 0; t < s; ++t)
                                  for (std::size_t k = 0; k < c; ++k)
                                    xn->grad[(i * s + t) * c + k] += self.grad[i * c + k] * inv;
                            });
}

}  // namespace lanecast
