// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "occflow/core/tensor.h"

// Binary container for checkpoints and prediction archives: a JSON meta block
// plus named float64 arrays, optionally zlib-compressed, with a trailing CRC32
// over the whole stream. Format is little-endian and versioned.
namespace occflow::ser {

struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> arrays;

  void add(std::string name, Tensor t) { arrays.emplace_back(std::move(name), std::move(t)); }
  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : arrays)
      if (n == name) return &t;
    return nullptr;
  }

  // compress=true runs each array through zlib; tiny arrays stay raw.
  void save(const std::string& path, bool compress = true) const;
  static Archive load(const std::string& path);
};

}  // namespace occflow::ser
