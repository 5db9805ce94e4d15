#pragma once

#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "tensor.hpp"

namespace mvb {

// Single-file archive: magic "MVBA", u32 version, u64 header length, JSON
// header, then raw little-endian float64 tensor payloads. The header names
// every tensor with shape and offset, plus kind/config/schedule/step/seeds.
struct CheckpointHeader {
  std::string kind;  // "score_net" | "radiance_field"
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json schedule = nlohmann::json::object();
  nlohmann::json seed_lineage = nlohmann::json::object();
  nlohmann::json extra = nlohmann::json::object();
  int64_t step = 0;
};

struct Checkpoint {
  CheckpointHeader header;
  std::vector<std::pair<std::string, Tensor>> tensors;  // in file order

  const Tensor* find(const std::string& name) const;
};

// Atomic: writes to a temp file in the same directory, then renames.
void save_checkpoint(const std::string& path, const CheckpointHeader& header,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace mvb
