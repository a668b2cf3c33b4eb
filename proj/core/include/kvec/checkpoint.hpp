#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kvec/parameters.hpp"

namespace kvec {

// On-disk layout:
//   u64 little-endian header length N
//   N bytes of JSON: {"format": "kvec-checkpoint", "version": 1, "meta": {...},
//                     "tensors": [{"name", "shape": [r, c], "dtype": "f32",
//                                  "offset", "nbytes"}, ...]}
//   raw little-endian f32 tensor data in header order; offsets are relative
//   to the first byte after the header.

struct CheckpointTensor {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;
};

struct Checkpoint {
  nlohmann::json meta;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(std::string_view name) const;
};

using NamedStore = std::pair<std::string, const ParameterStore*>;

/// Tensor names are "<prefix>/<parameter name>".
void write_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                      const std::vector<NamedStore>& stores);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies every parameter of `store` from the checkpoint; throws
/// ValidationError on a missing tensor or shape mismatch.
void load_parameters(ParameterStore& store, const Checkpoint& ckpt, std::string_view prefix);

}  // namespace kvec
