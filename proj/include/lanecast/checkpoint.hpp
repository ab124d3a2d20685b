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

// Parameter checkpoint container: a little-endian u64 header length, a JSON
// header listing {name, kind, shape} per tensor, then the raw f32 payloads
// back to back in header order.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "lanecast/tensor.hpp"

namespace lanecast {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian f32");

struct CheckpointEntry {
  std::string name;
  std::string kind;  // conv2d | conv1d-temporal | linear | batchnorm
  Tensor<float> tensor;
};

inline void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  nlohmann::json header;
  header["format"] = "lanecast-checkpoint";
  header["version"] = 1;
  auto& list = header["tensors"] = nlohmann::json::array();
  for (const auto& e : entries) {
    nlohmann::json item;
    item["name"] = e.name;
    item["kind"] = e.kind;
    item["shape"] = e.tensor.shape();
    list.push_back(std::move(item));
  }
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot open " + path + " for writing");
  const std::uint64_t len = header_str.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& e : entries) {
    const auto d = e.tensor.data();
    out.write(reinterpret_cast<const char*>(d.data()),
              static_cast<std::streamsize>(d.size() * sizeof(float)));
  }
  if (!out) throw IoError("checkpoint: write failed for " + path);
}

inline std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len == 0 || len > (1ull << 30)) {
    throw ParseError("checkpoint: bad header length in " + path);
  }
  std::string header_str(len, '\0');
  in.read(header_str.data(), static_cast<std::streamsize>(len));
  if (!in) throw ParseError("checkpoint: truncated header in " + path);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_str);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: header is not valid JSON: ") + e.what());
  }
  if (header.value("format", "") != "lanecast-checkpoint") {
    throw ParseError("checkpoint: unexpected format tag in " + path);
  }

  std::vector<CheckpointEntry> entries;
  for (const auto& item : header.at("tensors")) {
    CheckpointEntry e;
    e.name = item.at("name").get<std::string>();
    e.kind = item.at("kind").get<std::string>();
    Shape shape = item.at("shape").get<Shape>();
    std::vector<float> data(numel(shape));
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!in) throw ParseError("checkpoint: truncated payload for tensor " + e.name);
    e.tensor = Tensor<float>(std::move(shape), std::move(data));
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace lanecast
