#pragma once

// Run configuration and its flat key=value text form.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fireedit/dataset.hpp"
#include "fireedit/model.hpp"

namespace fireedit {

struct RunConfig {
  ModelConfig model;
  DatasetParams data;  // data.image_size follows model.image_size
  std::uint64_t seed = 0;
  std::size_t records = 8;
  std::size_t heldout_records = 32;
  std::size_t train_steps = 2000;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  std::string lr_schedule = "cosine";  // constant | cosine (decays to 0 at train_steps)
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  double p_img = 0.05;
  double p_txt = 0.05;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  std::size_t sample_steps = 64;
  double s_img = 1.5;
  double s_txt = 7.5;
  std::string metrics = "l1,l2,cosine,masked_l1";
  std::size_t ablate_seeds = 3;
  std::size_t ablate_records = 64;
  std::size_t ablate_steps = 600;

  void validate() const;
  std::vector<std::string> metric_names() const;
  bool operator==(const RunConfig& other) const;
};

// One "key=value" line per field in a fixed order.
std::string serialize_config(const RunConfig& cfg);
// Blank lines and lines starting with '#' are ignored; unknown keys,
// duplicates and malformed values raise ConfigError. Missing keys keep their
// defaults.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);

// Tiny widths for the finite-difference gradient check.
RunConfig micro_config();

}  // namespace fireedit
