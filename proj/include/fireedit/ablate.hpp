#pragma once

// Region / TATI / HVCA ablation over several seeds on region-critical data.

#include <ostream>
#include <string>
#include <vector>

#include "fireedit/config.hpp"
#include "fireedit/record.hpp"

namespace fireedit {

enum class Arm { full, no_region, no_tati, no_hvca };
const char* arm_name(Arm arm);
// Copy of `cfg` with the arm's component switched off.
RunConfig arm_config(const RunConfig& cfg, Arm arm);

struct ArmResult {
  std::uint64_t seed = 0;
  Arm arm = Arm::full;
  double l1 = 0, masked_l1 = 0;
  double final_loss = 0;
};

struct AblationReport {
  std::vector<ArmResult> results;

  const ArmResult& at(std::uint64_t seed, Arm arm) const;
  std::vector<std::uint64_t> seeds() const;
  // Held-out L1 strictly lower with regions than without, per seed.
  std::size_t region_wins() const;
  // Full model better on at least one of {masked L1, L1}, per seed.
  std::size_t wins_over(Arm arm) const;
};

struct AblationData {
  std::vector<DatasetRecord> train, heldout;
};
// Region-critical training and held-out sets drawn from disjoint seeds.
AblationData ablation_data(const RunConfig& cfg);

// Trains and evaluates every arm for seeds cfg.seed .. cfg.seed + ablate_seeds - 1.
AblationReport run_ablation(const RunConfig& cfg, std::ostream* progress = nullptr);

std::string format_ablation(const AblationReport& report);

}  // namespace fireedit
