#include "fireedit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "fireedit/dataset.hpp"
#include "fireedit/model.hpp"

namespace fireedit {

namespace {

using Model = EditModel<double>;

struct Probe {
  std::size_t param;  // index into store.params()
  std::size_t entry;
  double numeric = 0;
};

struct Case {
  DatasetRecord record;
  TrainDraw<double> draw;
};

// Gradients below the floor are compared in absolute terms; central differences
// carry roughly eps*|L|/h of roundoff.
constexpr double kFloor = 1e-5;

double rel_error(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), kFloor}); }

Tensor<double> joint_loss(const Model& model, const std::vector<Case>& cases) {
  Tensor<double> loss;
  for (const Case& c : cases) {
    const Tensor<double> t = model.losses(c.record, c.draw).total;
    loss = loss.defined() ? add(loss, t) : t;
  }
  return loss;
}

std::vector<std::vector<double>> analytic(Model& model, const std::vector<Case>& cases) {
  model.store().zero_grad();
  GradTape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(joint_loss(model, cases));
  }
  std::vector<std::vector<double>> out;
  for (const auto& p : model.store().params()) out.push_back(p.value.grad());
  return out;
}

const char* fault_name(BackwardFault f) {
  switch (f) {
    case BackwardFault::none: return "none";
    case BackwardFault::matmul: return "matmul";
    case BackwardFault::softmax: return "softmax";
    case BackwardFault::layer_norm: return "layer_norm";
    case BackwardFault::gelu: return "gelu";
    case BackwardFault::add_rowvec: return "add_rowvec";
    case BackwardFault::conv2d: return "conv2d";
    case BackwardFault::mul: return "mul";
  }
  return "?";
}

std::vector<GroupError> compare(const Model& model, const std::vector<Probe>& probes,
                                const std::vector<std::vector<double>>& grads) {
  std::map<std::string, GroupError> by_group;
  std::vector<std::string> order;
  for (const Probe& pr : probes) {
    const auto& p = model.store().params()[pr.param];
    auto [it, fresh] = by_group.try_emplace(p.group);
    if (fresh) {
      order.push_back(p.group);
      it->second.group = p.group;
    }
    GroupError& g = it->second;
    const double e = rel_error(grads[pr.param][pr.entry], pr.numeric);
    ++g.checked;
    if (e >= g.max_rel) {
      g.max_rel = e;
      g.worst = p.name + "[" + std::to_string(pr.entry) + "]";
    }
  }
  std::vector<GroupError> out;
  for (const auto& name : order) out.push_back(by_group[name]);
  return out;
}

}  // namespace

bool GradcheckReport::gradients_ok() const {
  if (!frozen_with_grad.empty() || groups.empty()) return false;
  return std::all_of(groups.begin(), groups.end(), [&](const GroupError& g) { return g.max_rel <= tolerance; });
}

std::size_t GradcheckReport::detected() const {
  return static_cast<std::size_t>(std::count_if(mutations.begin(), mutations.end(), [](const auto& m) { return m.detected; }));
}

GradcheckReport run_gradcheck(const RunConfig& cfg, const GradcheckOptions& options, bool mutations) {
  cfg.validate();
  Model model(cfg.model, mix_seed(options.seed, 0x4743));
  Rng rng(mix_seed(options.seed, 0x4744));
  for (auto& p : model.store().params()) {
    if (!p.trainable) continue;
    auto w = p.value.mutable_data();
    if (std::all_of(w.begin(), w.end(), [](double v) { return v == 0.0; }))
      for (double& v : w) v = 0.1 * rng.normal();
  }

  DatasetParams dp = cfg.data;
  dp.image_size = cfg.model.image_size;
  const auto records = generate_dataset(dp, 2, mix_seed(options.seed, 0x4745));
  const std::size_t lat = cfg.model.latent_size();
  const Shape eps_shape{lat, lat, model.codec().channels()};
  const auto noise = [&] {
    std::vector<double> v(shape_numel(eps_shape));
    for (double& x : v) x = rng.normal();
    return Tensor<double>(eps_shape, v);
  };
  std::vector<Case> cases;
  cases.push_back({records[0], TrainDraw<double>{DropDecision{false, false}, cfg.model.steps / 2, noise()}});
  cases.push_back({records[1], TrainDraw<double>{DropDecision{true, true}, cfg.model.steps / 3, noise()}});

  std::vector<Probe> probes;
  const auto& params = model.store().params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    const std::size_t n = params[i].value.size();
    const std::size_t k = std::min(n, options.entries_per_tensor);
    std::vector<std::size_t> picks(n);
    for (std::size_t j = 0; j < n; ++j) picks[j] = j;
    for (std::size_t j = 0; j < k; ++j) std::swap(picks[j], picks[j + rng.between(0, n - 1 - j)]);
    for (std::size_t j = 0; j < k; ++j) probes.push_back({i, picks[j], 0.0});
  }
  for (Probe& pr : probes) {
    double& w = model.store().params()[pr.param].value.mutable_data()[pr.entry];
    const double w0 = w;
    w = w0 + options.h;
    const double up = joint_loss(model, cases).item();
    w = w0 - options.h;
    const double down = joint_loss(model, cases).item();
    w = w0;
    pr.numeric = (up - down) / (2 * options.h);
  }

  GradcheckReport rep;
  rep.tolerance = options.tolerance;
  const BackwardFault previous = injected_backward_fault();
  inject_backward_fault(BackwardFault::none);
  const auto grads = analytic(model, cases);
  for (const auto& p : model.store().params())
    if (!p.trainable && p.value.has_grad()) rep.frozen_with_grad.push_back(p.name);
  rep.groups = compare(model, probes, grads);

  if (mutations) {
    for (BackwardFault f : {BackwardFault::matmul, BackwardFault::softmax, BackwardFault::layer_norm,
                            BackwardFault::gelu, BackwardFault::add_rowvec, BackwardFault::conv2d,
                            BackwardFault::mul}) {
      inject_backward_fault(f);
      const auto bad = compare(model, probes, analytic(model, cases));
      inject_backward_fault(BackwardFault::none);
      MutationResult m{fault_name(f), 0.0, false};
      for (const auto& g : bad) m.max_rel = std::max(m.max_rel, g.max_rel);
      m.detected = m.max_rel > options.tolerance;
      rep.mutations.push_back(m);
    }
  }
  inject_backward_fault(previous);
  model.store().zero_grad();
  return rep;
}

std::string format_gradcheck(const GradcheckReport& report) {
  std::string out;
  char buf[256];
  for (const GroupError& g : report.groups) {
    std::snprintf(buf, sizeof(buf), "group=%s checked=%zu max_rel=%.3e worst=%s %s\n", g.group.c_str(), g.checked,
                  g.max_rel, g.worst.c_str(), g.max_rel <= report.tolerance ? "ok" : "FAIL");
    out += buf;
  }
  for (const auto& name : report.frozen_with_grad) out += "frozen parameter has a gradient: " + name + "\n";
  for (const MutationResult& m : report.mutations) {
    std::snprintf(buf, sizeof(buf), "fault=%s max_rel=%.3e %s\n", m.fault.c_str(), m.max_rel,
                  m.detected ? "detected" : "missed");
    out += buf;
  }
  return out;
}

}  // namespace fireedit
