// Acceptance gates: one PASS/FAIL line per criterion, exit 2 on any failure.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "fireedit/ablate.hpp"
#include "fireedit/dataset.hpp"
#include "fireedit/evaluate.hpp"
#include "fireedit/gradcheck.hpp"
#include "fireedit/io.hpp"
#include "fireedit/train.hpp"

using namespace fireedit;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Gate {
  std::string name;
  bool pass = false;
  std::string detail;
};

std::vector<Gate> gates;

void report(const std::string& name, bool pass, const std::string& detail) {
  gates.push_back({name, pass, detail});
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), f, a, b, c);
  return buf;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Tensor<double> random_tensor(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor<double>(std::move(shape), std::move(v));
}

bool bitwise_equal(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (std::memcmp(&a.data()[i], &b.data()[i], sizeof(float)) != 0) return false;
  return true;
}

void gradcheck_gates() {
  const auto t0 = Clock::now();
  const GradcheckReport r = run_gradcheck(micro_config(), GradcheckOptions{});
  const double secs = seconds_since(t0);
  double worst = 0;
  std::string worst_group;
  for (const auto& g : r.groups)
    if (g.max_rel >= worst) {
      worst = g.max_rel;
      worst_group = g.group;
    }
  report("gradcheck: every group rel err <= 1e-4 (fp64, h=1e-5, micro, < 120 s)",
         r.gradients_ok() && secs < 120.0,
         std::to_string(r.groups.size()) + " groups, worst " + fmt("%.3e", worst) + " in " + worst_group +
             fmt(", %.1f s", secs) + (r.frozen_with_grad.empty() ? "" : ", frozen tensors received gradients"));
  report("gradcheck: mutation test detects >= 3 injected backward faults", r.detected() >= 3,
         std::to_string(r.detected()) + "/" + std::to_string(r.mutations.size()) + " detected");
}

void guidance_gates() {
  Rng rng(11);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.normal(), b = rng.normal(), c = rng.normal();
    worst = std::max({worst, std::abs(cfg_combine(a, b, c, {0, 0}) - a), std::abs(cfg_combine(a, b, c, {1, 1}) - c)});
  }
  report("cfg: (0,0) gives eps(0,0) and (1,1) gives eps(cI,cT) within 1e-6", worst <= 1e-6,
         fmt("max deviation %.3e", worst));
  const double v = cfg_combine(1, 2, 4, {1.5, 7.5});
  report("cfg: scalar case 1,2,4 at (1.5, 7.5) gives 17.5 within 1e-12", std::abs(v - 17.5) <= 1e-12,
         fmt("value %.17g", v));
  worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const double a = rng.normal(), d = rng.normal();
    const GuidanceScales s{rng.uniform() * 10, rng.uniform() * 10};
    // Collinear predictions a, a+d, a+2d land on the same line at a + (s_I + s_T) d.
    worst = std::max(worst, std::abs(cfg_combine(a, a + d, a + 2 * d, s) - (a + (s.image + s.text) * d)));
  }
  report("cfg: affine at 3 collinear points within 1e-6", worst <= 1e-6, fmt("max deviation %.3e", worst));
}

void attention_gates() {
  ParamStore<double> store(21);
  const auto p = DecoupledAttention<double>::make(store, "dca", "dca", 16, 12, true);
  Rng rng(22);
  const auto z = random_tensor({10, 16}, rng), cond = random_tensor({6, 12}, rng), vis = random_tensor({5, 12}, rng);
  const auto br = decoupled_branches(p, z, cond, vis);
  const auto at0 = decoupled_cross_attention(p, z, cond, vis, 0.0);
  bool same = at0.shape() == br.text.shape();
  for (std::size_t i = 0; same && i < at0.size(); ++i) same = std::memcmp(&at0.data()[i], &br.text.data()[i], 8) == 0;
  report("decoupled attention: lambda=0 matches the text branch bitwise", same, same ? "identical" : "differs");

  double worst = 0;
  for (double lambda : {0.0, 0.5, 1.0, 2.0}) {
    const auto out = decoupled_cross_attention(p, z, cond, vis, lambda);
    for (std::size_t i = 0; i < out.size(); ++i)
      worst = std::max(worst, std::abs((out[i] - br.text[i]) - lambda * br.visual[i]));
  }
  report("decoupled attention: residual proportional to lambda in {0, .5, 1, 2} within 1e-6", worst <= 1e-6,
         fmt("max deviation %.3e", worst));

  const auto k1 = random_tensor({1, 12}, rng), k2 = random_tensor({1, 12}, rng);
  const double lambda = 1.3;
  const auto out = decoupled_cross_attention(p, z, k1, k2, lambda);
  worst = 0;
  for (std::size_t r = 0; r < 10; ++r)
    for (std::size_t j = 0; j < 16; ++j) {
      double v1 = 0, v2 = 0;
      for (std::size_t k = 0; k < 12; ++k) {
        v1 += k1[k] * p.v_text.weight[k * 16 + j];
        v2 += k2[k] * p.v_visual.weight[k * 16 + j];
      }
      worst = std::max(worst, std::abs(out[r * 16 + j] - (v1 + lambda * v2)));
    }
  report("decoupled attention: single key gives V1 + lambda V2 within 1e-6", worst <= 1e-6,
         fmt("max deviation %.3e", worst));
}

void zero_init_gates() {
  const RunConfig cfg;
  EditModel<float> model(cfg.model, 31);
  const auto data = generate_dataset(cfg.data, 4, 32);
  bool same = true;
  for (const auto& r : data) {
    const auto img = image_tensor<float>(r.source);
    model.vlm().set_adapted(true);
    const auto a = model.vlm().run(img, r.instruction, r.boxes, true);
    model.vlm().set_adapted(false);
    const auto b = model.vlm().run(img, r.instruction, r.boxes, true);
    same = same && bitwise_equal(a.logits, b.logits) && bitwise_equal(a.hidden, b.hidden);
  }
  model.vlm().set_adapted(true);
  report("zero-init: LoRA B=0 reproduces the base model bitwise", same, same ? "4 records identical" : "differs");

  const auto e_t = model.encode_text(image_tensor<float>(data[0].source), data[0].instruction, data[0].boxes).e_t;
  const auto ref = model.tati()(e_t, 0);
  bool indep = true;
  for (std::size_t t = 1; t <= cfg.model.steps; ++t) indep = indep && bitwise_equal(model.tati()(e_t, t), ref);
  report("zero-init: TATI with zero modulation is timestep-independent bitwise", indep,
         indep ? "t = 0..T identical" : "differs");
}

void codec_gate() {
  const LatentCodec codec(2);
  Rng rng(41);
  double rt = 0, iso = 0;
  const auto image = [&] {
    std::vector<double> v(16 * 16 * 3);
    for (double& x : v) x = rng.uniform();
    return Tensor<double>({16, 16, 3}, v);
  };
  for (int i = 0; i < 100; ++i) {
    const auto x = image(), y = image();
    const auto zx = codec.encode(x), zy = codec.encode(y);
    const auto back = codec.decode(zx);
    for (std::size_t j = 0; j < x.size(); ++j) rt = std::max(rt, std::abs(back[j] - x[j]));
    double dx = 0, dz = 0;
    for (std::size_t j = 0; j < x.size(); ++j) dx += (x[j] - y[j]) * (x[j] - y[j]);
    for (std::size_t j = 0; j < zx.size(); ++j) dz += (zx[j] - zy[j]) * (zx[j] - zy[j]);
    iso = std::max(iso, std::abs(std::sqrt(dx) - std::sqrt(dz)));
  }
  report("codec: round trip and isometry within 1e-5 on 100 random images", rt <= 1e-5 && iso <= 1e-5,
         fmt("round trip %.3e, isometry %.3e", rt, iso));
}

void overfit_gates() {
  RunConfig cfg;
  cfg.seed = 1;
  cfg.records = 8;
  cfg.batch_size = 8;
  cfg.train_steps = 2000;
  const auto data = generate_dataset(cfg.data, cfg.records, cfg.seed);
  const auto t0 = Clock::now();
  Trainer trainer(cfg, data);
  // Losses at fixed draws (the first 8 steps' dropout, timesteps and noise).
  const auto probe = [&] {
    double s = 0;
    for (std::size_t k = 0; k < 8; ++k) s += trainer.evaluate_losses(k).l_total;
    return s / 8;
  };
  const double before = probe();
  trainer.run(cfg.train_steps);
  const double after = probe();
  const double train_secs = seconds_since(t0);
  SampleOptions o;
  o.scales = GuidanceScales{cfg.s_img, cfg.s_txt};
  o.steps = cfg.sample_steps;
  o.seed = 5;
  const EvalReport ev = evaluate(trainer.model(), data, o, {"l1", "masked_l1"});
  const double secs = seconds_since(t0);
  const double drop = 1 - after / before;
  report("overfit: L_total falls >= 90% from step 0 (8 records, 2000 steps, < 10 min)",
         drop >= 0.9 && secs < 600, fmt("%.4f -> %.4f", before, after) + fmt(" (%.1f%%), %.0f s total", 100 * drop, secs));
  report("overfit: greedy [IMG] slot accuracy = 1.0", ev.slot_accuracy() == 1.0, fmt("%.4f", ev.slot_accuracy()));
  report("overfit: sampled mean L1 <= 0.05", ev.mean("l1") <= 0.05, fmt("%.4f", ev.mean("l1")));
  report("overfit: masked L1 outside the edit box <= 0.02", ev.mean("masked_l1") <= 0.02,
         fmt("%.4f", ev.mean("masked_l1")));
  (void)train_secs;
}

void ablation_gates() {
  RunConfig cfg;
  cfg.seed = 100;
  const auto t0 = Clock::now();
  const AblationReport r = run_ablation(cfg, &std::cerr);
  const std::size_t n = r.seeds().size();
  std::string region, tati, hvca;
  for (auto s : r.seeds()) {
    const auto& f = r.at(s, Arm::full);
    region += fmt(" %.4f<%.4f", f.l1, r.at(s, Arm::no_region).l1);
    tati += fmt(" l1 %.4f/%.4f ml1 %.4f/", f.l1, r.at(s, Arm::no_tati).l1, f.masked_l1) +
            fmt("%.4f;", r.at(s, Arm::no_tati).masked_l1);
    hvca += fmt(" l1 %.4f/%.4f ml1 %.4f/", f.l1, r.at(s, Arm::no_hvca).l1, f.masked_l1) +
            fmt("%.4f;", r.at(s, Arm::no_hvca).masked_l1);
  }
  const std::string counts = " (" + std::to_string(n) + " seeds, " + fmt("%.0f s)", seconds_since(t0));
  report("ablation: held-out L1 lower with regions than --no-region in 3/3 seeds",
         n == 3 && r.region_wins() == n, std::to_string(r.region_wins()) + "/" + std::to_string(n) + ":" + region + counts);
  report("ablation: full beats --no-tati on masked-L1 or L1 in every seed", r.wins_over(Arm::no_tati) == n,
         std::to_string(r.wins_over(Arm::no_tati)) + "/" + std::to_string(n) + ":" + tati);
  report("ablation: full beats --no-hvca on masked-L1 or L1 in every seed", r.wins_over(Arm::no_hvca) == n,
         std::to_string(r.wins_over(Arm::no_hvca)) + "/" + std::to_string(n) + ":" + hvca);
}

void determinism_gate(const std::string& cli) {
  const fs::path root = fs::temp_directory_path() / "fireedit_determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path config = root / "run.cfg";
  {
    std::ofstream f(config);
    f << "records=4\nbatch_size=4\ntrain_steps=25\nsample_steps=16\n";
  }
  bool ok = true;
  for (const char* run : {"a", "b"}) {
    const fs::path out = root / run;
    const std::string base = "\"" + cli + "\" ";
    const std::string train = base + "train --config \"" + config.string() + "\" --seed 9 --out \"" + out.string() + "\"";
    const std::string eval = base + "eval --checkpoint \"" + (out / "checkpoint.bin").string() + "\" --seed 9 --out \"" +
                             out.string() + "\"";
    ok = ok && std::system((train + " > /dev/null").c_str()) == 0 && std::system((eval + " > /dev/null").c_str()) == 0;
  }
  const auto same = [&](const char* file) { return read_file((root / "a" / file).string()) == read_file((root / "b" / file).string()); };
  const bool ck = ok && same("checkpoint.bin"), metrics = ok && same("metrics.txt"), log = ok && same("train.log");
  report("determinism: two single-threaded runs give byte-identical checkpoints and metric reports",
         ck && metrics && log,
         !ok ? "a run failed" : std::string("checkpoint ") + (ck ? "same" : "differs") + ", metrics " +
                                    (metrics ? "same" : "differs") + ", log " + (log ? "same" : "differs"));
  fs::remove_all(root);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance gates"};
  std::string cli = FIREEDIT_CLI_PATH;
  bool skip_overfit = false, skip_ablation = false;
  app.add_option("--cli", cli, "path to the fireedit executable");
  app.add_flag("--skip-overfit", skip_overfit, "skip the overfit gates");
  app.add_flag("--skip-ablation", skip_ablation, "skip the ablation gates");
  CLI11_PARSE(app, argc, argv);

  try {
    gradcheck_gates();
    guidance_gates();
    attention_gates();
    zero_init_gates();
    codec_gate();
    determinism_gate(cli);
    if (!skip_overfit) overfit_gates();
    if (!skip_ablation) ablation_gates();
  } catch (const std::exception& e) {
    report("acceptance harness", false, e.what());
  }
  std::size_t failed = 0;
  for (const Gate& g : gates) failed += !g.pass;
  std::cout << (failed == 0 ? "ALL PASS" : std::to_string(failed) + " FAILED") << " (" << gates.size() << " gates)"
            << std::endl;
  return failed == 0 ? 0 : 2;
}
