#include "fireedit/ablate.hpp"

#include <algorithm>
#include <cstdio>

#include "fireedit/dataset.hpp"
#include "fireedit/evaluate.hpp"
#include "fireedit/train.hpp"

namespace fireedit {

namespace {
constexpr std::uint64_t kTrainDataSalt = 0x41424C54;
constexpr std::uint64_t kHeldoutSalt = 0x41424C48;
constexpr Arm kArms[] = {Arm::full, Arm::no_region, Arm::no_tati, Arm::no_hvca};
}  // namespace

const char* arm_name(Arm arm) {
  switch (arm) {
    case Arm::full: return "full";
    case Arm::no_region: return "no-region";
    case Arm::no_tati: return "no-tati";
    case Arm::no_hvca: return "no-hvca";
  }
  return "?";
}

RunConfig arm_config(const RunConfig& cfg, Arm arm) {
  RunConfig c = cfg;
  c.model.use_region = cfg.model.use_region && arm != Arm::no_region;
  c.model.use_tati = cfg.model.use_tati && arm != Arm::no_tati;
  c.model.use_hvca = cfg.model.use_hvca && arm != Arm::no_hvca;
  return c;
}

const ArmResult& AblationReport::at(std::uint64_t seed, Arm arm) const {
  for (const ArmResult& r : results)
    if (r.seed == seed && r.arm == arm) return r;
  throw ContractError("ablation has no result for seed " + std::to_string(seed) + " arm " + arm_name(arm));
}

std::vector<std::uint64_t> AblationReport::seeds() const {
  std::vector<std::uint64_t> out;
  for (const ArmResult& r : results)
    if (std::find(out.begin(), out.end(), r.seed) == out.end()) out.push_back(r.seed);
  return out;
}

std::size_t AblationReport::region_wins() const {
  std::size_t n = 0;
  for (auto s : seeds()) n += at(s, Arm::full).l1 < at(s, Arm::no_region).l1;
  return n;
}

std::size_t AblationReport::wins_over(Arm arm) const {
  std::size_t n = 0;
  for (auto s : seeds()) {
    const ArmResult& f = at(s, Arm::full);
    const ArmResult& o = at(s, arm);
    n += f.l1 < o.l1 || f.masked_l1 < o.masked_l1;
  }
  return n;
}

AblationData ablation_data(const RunConfig& cfg) {
  DatasetParams p = cfg.data;
  p.image_size = cfg.model.image_size;
  p.region_critical_fraction = 1.0;
  return {generate_dataset(p, cfg.ablate_records, mix_seed(cfg.seed, kTrainDataSalt)),
          generate_dataset(p, cfg.heldout_records, mix_seed(cfg.seed, kHeldoutSalt))};
}

AblationReport run_ablation(const RunConfig& cfg, std::ostream* progress) {
  cfg.validate();
  const AblationData data = ablation_data(cfg);
  AblationReport rep;
  for (std::size_t k = 0; k < cfg.ablate_seeds; ++k) {
    for (Arm arm : kArms) {
      RunConfig c = arm_config(cfg, arm);
      c.seed = cfg.seed + k;
      c.train_steps = cfg.ablate_steps;
      Trainer trainer(c, data.train);
      const auto logs = trainer.run(c.train_steps);
      SampleOptions o;
      o.scales = GuidanceScales{c.s_img, c.s_txt};
      o.steps = c.sample_steps;
      o.seed = c.seed;
      const EvalReport ev = evaluate(trainer.model(), data.heldout, o, {"l1", "masked_l1"});
      ArmResult r;
      r.seed = c.seed;
      r.arm = arm;
      r.l1 = ev.mean("l1");
      r.masked_l1 = ev.mean("masked_l1");
      r.final_loss = logs.empty() ? 0.0 : logs.back().l_total;
      rep.results.push_back(r);
      if (progress) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "seed=%llu arm=%s l1=%.9g masked_l1=%.9g", static_cast<unsigned long long>(r.seed),
                      arm_name(arm), r.l1, r.masked_l1);
        *progress << buf << '\n' << std::flush;
      }
    }
  }
  return rep;
}

std::string format_ablation(const AblationReport& report) {
  std::string out;
  char buf[200];
  for (const ArmResult& r : report.results) {
    std::snprintf(buf, sizeof(buf), "seed=%llu arm=%s l1=%.9g masked_l1=%.9g final_loss=%.9g\n",
                  static_cast<unsigned long long>(r.seed), arm_name(r.arm), r.l1, r.masked_l1, r.final_loss);
    out += buf;
  }
  const std::size_t n = report.seeds().size();
  std::snprintf(buf, sizeof(buf), "region_wins=%zu/%zu\nno_tati_wins=%zu/%zu\nno_hvca_wins=%zu/%zu\n",
                report.region_wins(), n, report.wins_over(Arm::no_tati), n, report.wins_over(Arm::no_hvca), n);
  out += buf;
  return out;
}

}  // namespace fireedit
