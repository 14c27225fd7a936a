#include "fireedit/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "fireedit/kernels.hpp"

namespace fireedit {

namespace {

constexpr std::uint64_t kModelSalt = 0x4D4F44454Cull;
constexpr std::uint64_t kTrainSalt = 0x545241494Eull;

AdamSettings settings_of(const RunConfig& c) {
  return AdamSettings{c.learning_rate, c.beta1, c.beta2, c.adam_eps, c.grad_clip};
}

std::string first_non_finite(const GradTape<float>& tape) {
  const auto entries = tape.entries();
  for (std::size_t i = 0; i < entries.size(); ++i)
    for (float v : entries[i].output->data)
      if (!std::isfinite(v))
        return "op '" + std::string(entries[i].op) + "' (tape entry " + std::to_string(i) + ", shape " +
               shape_str(entries[i].output->shape) + ")";
  return "an untracked tensor";
}

}  // namespace

Adam::Adam(const ParamStore<float>& store, AdamSettings settings) : s_(settings) {
  for (const auto& p : store.params())
    if (p.trainable) {
      m_.emplace_back(p.value.size(), 0.0f);
      v_.emplace_back(p.value.size(), 0.0f);
    }
}

double Adam::step(ParamStore<float>& store, double lr) {
  if (!(lr > 0)) lr = s_.lr;
  double sq = 0;
  for (const auto& p : store.params()) {
    if (!p.trainable || !p.value.has_grad()) continue;
    const auto g = p.value.grad();
    for (float x : g) sq += static_cast<double>(x) * x;
  }
  const double norm = std::sqrt(sq);
  const double clip = norm > s_.clip ? s_.clip / norm : 1.0;
  ++t_;
  const double bc1 = 1.0 - std::pow(s_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(s_.beta2, static_cast<double>(t_));
  const auto step = static_cast<float>(lr / bc1), inv_bc2 = static_cast<float>(1.0 / bc2);
  std::size_t k = 0;
  for (auto& p : store.params()) {
    if (!p.trainable) continue;
    auto& m = m_[k];
    auto& v = v_[k];
    ++k;
    kernels::adam_update(m.size(), p.value.mutable_data().data(), p.value.grad().data(), m.data(), v.data(),
                         static_cast<float>(clip), static_cast<float>(s_.beta1), static_cast<float>(s_.beta2), step,
                         inv_bc2, static_cast<float>(s_.eps));
  }
  return norm;
}

double learning_rate_at(const RunConfig& cfg, std::size_t step) {
  if (cfg.lr_schedule != "cosine" || cfg.train_steps == 0) return cfg.learning_rate;
  const double pi = std::acos(-1.0);
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.train_steps));
  return cfg.learning_rate * 0.5 * (1.0 + std::cos(pi * frac));
}

std::string format_log(const StepLog& log) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "step=%zu l_vlm=%.9g l_diff=%.9g l_total=%.9g lr=%.9g", log.step, log.l_vlm,
                log.l_diff, log.l_total, log.lr);
  return buf;
}

StepLog parse_log(const std::string& line) {
  StepLog s;
  if (std::sscanf(line.c_str(), "step=%zu l_vlm=%lf l_diff=%lf l_total=%lf lr=%lf", &s.step, &s.l_vlm, &s.l_diff,
                  &s.l_total, &s.lr) != 5)
    throw ConfigError("malformed log line: " + line);
  return s;
}

Trainer::Trainer(const RunConfig& cfg, std::vector<DatasetRecord> data)
    : cfg_(cfg),
      data_(std::move(data)),
      model_((cfg.validate(), std::make_unique<EditModel<float>>(cfg.model, mix_seed(cfg.seed, kModelSalt)))),
      adam_(model_->store(), settings_of(cfg)) {
  if (data_.empty()) throw ConfigError("training needs at least one record");
  for (const DatasetRecord& r : data_)
    if (r.source.height != cfg.model.image_size || r.source.width != cfg.model.image_size)
      throw ConfigError("dataset images are " + std::to_string(r.source.height) + "x" +
                        std::to_string(r.source.width) + " but image_size is " +
                        std::to_string(cfg.model.image_size));
}

std::vector<std::size_t> Trainer::batch(std::size_t step, Rng& rng) const {
  (void)step;
  std::vector<std::size_t> idx(data_.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (cfg_.batch_size >= data_.size()) return idx;
  for (std::size_t i = 0; i < cfg_.batch_size; ++i) std::swap(idx[i], idx[i + rng.between(0, idx.size() - 1 - i)]);
  idx.resize(cfg_.batch_size);
  return idx;
}

StepLog Trainer::train_step() {
  Rng rng(mix_seed(mix_seed(cfg_.seed, kTrainSalt), step_));
  const auto idx = batch(step_, rng);
  GradTape<float> tape;
  StepLog log;
  log.step = step_;
  log.lr = learning_rate_at(cfg_, step_);
  {
    TapeScope<float> scope(tape);
    std::vector<Tensor<float>> totals;
    try {
      for (std::size_t i : idx) {
        const TrainDraw<float> d = model_->draw(rng, cfg_.p_img, cfg_.p_txt);
        const LossParts<float> parts = model_->losses(data_[i], d);
        log.l_vlm += parts.vlm.item();
        log.l_diff += parts.diff.item();
        totals.push_back(parts.total);
      }
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step_) + ": " + e.what() + "; first non-finite tensor from " +
                         first_non_finite(tape));
    }
    Tensor<float> loss = totals[0];
    for (std::size_t i = 1; i < totals.size(); ++i) loss = add(loss, totals[i]);
    loss = scale(loss, 1.0f / static_cast<float>(totals.size()));
    log.l_total = loss.item();
    if (!std::isfinite(log.l_total))
      throw NumericError("non-finite loss at step " + std::to_string(step_) + "; first non-finite tensor from " +
                         first_non_finite(tape));
    tape.backward(loss);
  }
  for (const auto& p : model_->store().params())
    if (p.trainable && p.value.has_grad())
      for (float g : p.value.grad())
        if (!std::isfinite(g))
          throw NumericError("non-finite gradient for parameter " + p.name + " at step " + std::to_string(step_));
  log.l_vlm /= static_cast<double>(idx.size());
  log.l_diff /= static_cast<double>(idx.size());
  adam_.step(model_->store(), log.lr);
  model_->store().zero_grad();
  ++step_;
  return log;
}

StepLog Trainer::evaluate_losses(std::size_t step) const {
  Rng rng(mix_seed(mix_seed(cfg_.seed, kTrainSalt), step));
  const auto idx = batch(step, rng);
  StepLog log;
  log.step = step;
  log.lr = learning_rate_at(cfg_, step);
  double total = 0;
  for (std::size_t i : idx) {
    const TrainDraw<float> d = model_->draw(rng, cfg_.p_img, cfg_.p_txt);
    const LossParts<float> parts = model_->losses(data_[i], d);
    log.l_vlm += parts.vlm.item();
    log.l_diff += parts.diff.item();
    total += parts.total.item();
  }
  const double n = static_cast<double>(idx.size());
  log.l_vlm /= n;
  log.l_diff /= n;
  log.l_total = total / n;
  return log;
}

std::vector<StepLog> Trainer::run(std::size_t until, std::ostream* log,
                                  const std::function<void(const Trainer&)>& on_checkpoint) {
  std::vector<StepLog> out;
  while (step_ < until) {
    out.push_back(train_step());
    if (log) *log << format_log(out.back()) << '\n' << std::flush;
    if (on_checkpoint && cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0) on_checkpoint(*this);
  }
  return out;
}

std::vector<NamedTensor> model_tensors(const ParamStore<float>& store) {
  std::vector<NamedTensor> out;
  for (const auto& p : store.params())
    out.push_back(NamedTensor{p.name, p.value.shape(), std::vector<float>(p.value.data().begin(), p.value.data().end())});
  return out;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.step = step_;
  c.config = serialize_config(cfg_);
  c.tensors = model_tensors(model_->store());
  std::size_t k = 0;
  for (const auto& p : model_->store().params()) {
    if (!p.trainable) continue;
    c.tensors.push_back(NamedTensor{"adam.m." + p.name, p.value.shape(), adam_.first()[k]});
    c.tensors.push_back(NamedTensor{"adam.v." + p.name, p.value.shape(), adam_.second()[k]});
    ++k;
  }
  return c;
}

void load_model_tensors(ParamStore<float>& store, const Checkpoint& ckpt) {
  std::vector<NamedTensor> found;
  for (const auto& t : ckpt.tensors)
    if (t.name.rfind("adam.", 0) != 0) found.push_back(NamedTensor{t.name, t.shape, {}});
  std::vector<NamedTensor> expected;
  for (const auto& p : store.params()) expected.push_back(NamedTensor{p.name, p.value.shape(), {}});
  const auto diff = tensor_diff(expected, found);
  if (!diff.empty()) {
    std::string msg = "checkpoint does not match the model:";
    for (const auto& d : diff) msg += "\n  " + d;
    throw ConfigError(msg);
  }
  for (auto& p : store.params()) {
    const NamedTensor* t = ckpt.find(p.name);
    auto w = p.value.mutable_data();
    std::copy(t->values.begin(), t->values.end(), w.begin());
  }
}

void Trainer::restore(const Checkpoint& ckpt) {
  load_model_tensors(model_->store(), ckpt);
  std::size_t k = 0;
  for (const auto& p : model_->store().params()) {
    if (!p.trainable) continue;
    const NamedTensor* m = ckpt.find("adam.m." + p.name);
    const NamedTensor* v = ckpt.find("adam.v." + p.name);
    if (!m || !v || m->shape != p.value.shape() || v->shape != p.value.shape())
      throw ConfigError("checkpoint lacks optimizer state for " + p.name);
    adam_.first()[k] = m->values;
    adam_.second()[k] = v->values;
    ++k;
  }
  adam_.set_steps(ckpt.step);
  step_ = ckpt.step;
}

std::unique_ptr<EditModel<float>> model_from_checkpoint(const Checkpoint& ckpt, RunConfig* cfg_out) {
  const RunConfig cfg = parse_config(ckpt.config);
  cfg.validate();
  auto model = std::make_unique<EditModel<float>>(cfg.model, mix_seed(cfg.seed, kModelSalt));
  load_model_tensors(model->store(), ckpt);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

std::unique_ptr<EditModel<float>> model_from_checkpoint(const Checkpoint& ckpt, const ModelConfig& cfg) {
  cfg.validate();
  auto model = std::make_unique<EditModel<float>>(cfg, 0);
  load_model_tensors(model->store(), ckpt);
  return model;
}

}  // namespace fireedit
