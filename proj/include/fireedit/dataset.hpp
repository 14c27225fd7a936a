#pragma once

// Synthetic rectangle-editing dataset with exact targets and oracle boxes.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fireedit/record.hpp"

namespace fireedit {

struct DatasetParams {
  std::size_t image_size = 16;
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 3;
  std::size_t palette_size = 6;
  double region_critical_fraction = 0.25;

  void validate() const;
};

struct Color {
  float r, g, b;
};

extern const float kBackground;

const std::vector<std::string>& vocabulary();
std::size_t word_id(const std::string& word);
std::string describe(const TokenSequence& instruction);
const std::vector<Color>& palette();

// Record i draws only from mix_seed(seed, i).
std::vector<DatasetRecord> generate_dataset(const DatasetParams& params, std::size_t count, std::uint64_t seed);

void save_dataset(const std::string& path, const std::vector<DatasetRecord>& records);
std::vector<DatasetRecord> load_dataset(const std::string& path);

}  // namespace fireedit
