#pragma once

// Finite-difference check of the joint loss gradient, grouped by parameter
// group, plus the mutation test that injects backward faults.

#include <cstdint>
#include <string>
#include <vector>

#include "fireedit/config.hpp"

namespace fireedit {

struct GradcheckOptions {
  double h = 1e-5;
  double tolerance = 1e-4;
  std::size_t entries_per_tensor = 16;
  std::uint64_t seed = 0;
};

struct GroupError {
  std::string group;
  std::size_t checked = 0;
  double max_rel = 0;
  std::string worst;  // "param[index]"
};

struct MutationResult {
  std::string fault;
  double max_rel = 0;
  bool detected = false;
};

struct GradcheckReport {
  std::vector<GroupError> groups;
  std::vector<std::string> frozen_with_grad;
  std::vector<MutationResult> mutations;
  double tolerance = 0;

  bool gradients_ok() const;
  std::size_t detected() const;
};

// Runs in double precision on `cfg.model`; every trainable tensor that is
// all zero at init gets small noise first so no branch is gated shut.
GradcheckReport run_gradcheck(const RunConfig& cfg, const GradcheckOptions& options, bool mutations = true);

std::string format_gradcheck(const GradcheckReport& report);

}  // namespace fireedit
