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

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace lanecast {

// ---------------------------------------------------------------------------
// Error taxonomy. Every throwing path in the library uses one of these so
// callers can distinguish bad shapes from bad numerics from API misuse.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct DimensionError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct LabelError : Error {
  using Error::Error;
};
struct GeometryError : Error {
  using Error::Error;
};
struct CoverageError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ParseError : Error {
  using Error::Error;
};
struct ValidationError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Numeric helpers
// ---------------------------------------------------------------------------

template <typename T>
bool all_finite(std::span<const T> values) {
  for (const T v : values) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

template <typename T>
void require_finite(std::span<const T> values, const char* what) {
  if (!all_finite(values)) {
    throw NumericError(std::string(what) + ": non-finite value encountered");
  }
}

// FNV-1a, used to derive per-cell / per-epoch seeds from a global seed.
inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes,
                           std::uint64_t seed = 0xcbf29ce484222325ull) {
  std::uint64_t h = seed;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t hash_combine(std::uint64_t seed, const std::string& token) {
  std::vector<std::uint8_t> bytes(token.begin(), token.end());
  return fnv1a(std::span<const std::uint8_t>(bytes.data(), bytes.size()), seed ^ 0xcbf29ce484222325ull);
}

inline std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t value) {
  std::uint8_t bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<std::uint8_t>(value >> (8 * i));
  return fnv1a(std::span<const std::uint8_t>(bytes, 8), seed ^ 0xcbf29ce484222325ull);
}

// ---------------------------------------------------------------------------
// Threading. Work is split into contiguous index ranges with disjoint writes,
// so results are identical for any thread count; reductions in the library
// always accumulate partials in a fixed order.
// ---------------------------------------------------------------------------

inline unsigned max_threads() {
  static const unsigned n = [] {
    if (const char* env = std::getenv("LANECAST_THREADS")) {
      const long v = std::strtol(env, nullptr, 10);
      if (v >= 1) return static_cast<unsigned>(v);
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1u : hc;
  }();
  return n;
}

namespace detail {
inline bool& inside_parallel_region() {
  thread_local bool inside = false;
  return inside;
}
}  // namespace detail

template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn, std::size_t grain = 1) {
  const unsigned threads = max_threads();
  if (count == 0) return;
  if (threads <= 1 || count <= grain || detail::inside_parallel_region()) {
    fn(std::size_t{0}, count);
    return;
  }
  const std::size_t chunks = std::min<std::size_t>(threads, (count + grain - 1) / grain);
  const std::size_t step = (count + chunks - 1) / chunks;
  std::vector<std::thread> workers;
  workers.reserve(chunks - 1);
  for (std::size_t c = 1; c < chunks; ++c) {
    const std::size_t begin = c * step;
    const std::size_t end = std::min(count, begin + step);
    if (begin >= end) break;
    workers.emplace_back([&fn, begin, end] {
      detail::inside_parallel_region() = true;
      fn(begin, end);
    });
  }
  detail::inside_parallel_region() = true;
  fn(std::size_t{0}, std::min(count, step));
  detail::inside_parallel_region() = false;
  for (auto& w : workers) w.join();
}

// ---------------------------------------------------------------------------
// Seeded RNG wrapper so every stochastic choice in the library routes through
// one engine type.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(engine_);
  }

  // [lo, hi] inclusive
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    std::uniform_int_distribution<std::int64_t> d(lo, hi);
    return d(engine_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> d(mean, stddev);
    return d(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace lanecast
