#pragma once

// Binary checkpoints: little-endian header (magic, format version, step,
// config snapshot, tensor count) followed by per-tensor name, rank, extents
// and raw 32-bit float values.

#include <cstdint>
#include <string>
#include <vector>

#include "fireedit/tensor.hpp"

namespace fireedit {

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  std::uint64_t step = 0;
  std::string config;  // serialized RunConfig
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const;
  bool operator==(const Checkpoint&) const = default;
};

std::vector<char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<char>& bytes, const std::string& what = "checkpoint");
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Lines describing every name/shape difference between the two tensor sets;
// empty when they agree.
std::vector<std::string> tensor_diff(const std::vector<NamedTensor>& expected,
                                     const std::vector<NamedTensor>& found);

}  // namespace fireedit
