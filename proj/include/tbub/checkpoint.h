#pragma once

// Binary checkpoint: "TBUB", u32 version, u64-prefixed canonical JSON
// {model, run}, named f64 parameter tensors, AdamW moments, RNG state.
// Everything little-endian; a write/read round trip is bit-exact.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "tbub/model.h"

namespace tbub {

struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<Matrix> m, v;  // first/second moments, aligned with ParamStore
};

OptimizerState zero_optimizer_state(const ParamStore& params);

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  ModelConfig model;
  nlohmann::json run = nlohmann::json::object();
  ParamStore params;
  OptimizerState optimizer;
  std::string rng_state;  // std::mt19937_64 in stream form
};

// Writes to a sibling temporary and renames, so a crash never leaves a
// truncated checkpoint under `path`.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace tbub
