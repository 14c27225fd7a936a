#pragma once

// Joint training loop, Adam with global-norm clipping, and checkpoint
// snapshot/restore of the full training state.

#include <cstddef>
#include <functional>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "fireedit/checkpoint.hpp"
#include "fireedit/config.hpp"
#include "fireedit/model.hpp"

namespace fireedit {

struct AdamSettings {
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, clip = 1.0;
};

class Adam {
 public:
  Adam(const ParamStore<float>& store, AdamSettings settings);

  // Clips the global gradient norm, applies one update and returns the
  // pre-clip norm. `lr` overrides the configured rate when positive.
  double step(ParamStore<float>& store, double lr = 0);

  std::size_t steps() const { return t_; }
  void set_steps(std::size_t t) { t_ = t; }
  std::vector<std::vector<float>>& first() { return m_; }
  std::vector<std::vector<float>>& second() { return v_; }
  const std::vector<std::vector<float>>& first() const { return m_; }
  const std::vector<std::vector<float>>& second() const { return v_; }

 private:
  AdamSettings s_;
  std::size_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;  // one per trainable parameter, registration order
};

struct StepLog {
  std::size_t step = 0;
  double l_vlm = 0, l_diff = 0, l_total = 0, lr = 0;
};

// Learning rate used for step `step` (0-based).
double learning_rate_at(const RunConfig& cfg, std::size_t step);

// "step=<n> l_vlm=<x> l_diff=<x> l_total=<x> lr=<x>"
std::string format_log(const StepLog& log);
StepLog parse_log(const std::string& line);

class Trainer {
 public:
  Trainer(const RunConfig& cfg, std::vector<DatasetRecord> data);

  EditModel<float>& model() { return *model_; }
  const EditModel<float>& model() const { return *model_; }
  const RunConfig& config() const { return cfg_; }
  const std::vector<DatasetRecord>& data() const { return data_; }
  std::size_t step() const { return step_; }

  // One joint optimizer step over a batch; the batch, dropout, timesteps and
  // noise derive only from (seed, step).
  StepLog train_step();
  // Runs until `until` steps have been taken. `on_checkpoint` fires every
  // checkpoint_every steps.
  std::vector<StepLog> run(std::size_t until, std::ostream* log = nullptr,
                           const std::function<void(const Trainer&)>& on_checkpoint = {});

  // Batch-mean losses at the current parameters without updating them.
  StepLog evaluate_losses(std::size_t step) const;

  Checkpoint checkpoint() const;
  void restore(const Checkpoint& ckpt);

 private:
  std::vector<std::size_t> batch(std::size_t step, Rng& rng) const;

  RunConfig cfg_;
  std::vector<DatasetRecord> data_;
  std::unique_ptr<EditModel<float>> model_;
  Adam adam_;
  std::size_t step_ = 0;
};

// Parameter tensors of a model (all of them, registration order).
std::vector<NamedTensor> model_tensors(const ParamStore<float>& store);
// Copies checkpoint values into the model; a name/shape mismatch raises
// ConfigError listing every differing tensor.
void load_model_tensors(ParamStore<float>& store, const Checkpoint& ckpt);

// Model with parameters from a checkpoint and the checkpoint's config.
std::unique_ptr<EditModel<float>> model_from_checkpoint(const Checkpoint& ckpt, RunConfig* cfg_out = nullptr);
// Same, but built from `model` (e.g. with inference-time switches changed).
std::unique_ptr<EditModel<float>> model_from_checkpoint(const Checkpoint& ckpt, const ModelConfig& model);

}  // namespace fireedit
