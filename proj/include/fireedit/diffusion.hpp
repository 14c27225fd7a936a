#pragma once

// Noise schedule, forward noising, the U-shaped latent denoiser, dual-scale
// classifier-free guidance and condition dropout.

#include <cstddef>
#include <vector>

#include "fireedit/conditioning.hpp"
#include "fireedit/nn.hpp"
#include "fireedit/rng.hpp"

namespace fireedit {

// Linear beta ramp from 1e-4 * (1000/T) to 2e-2 * (1000/T); alpha_bar(0) = 1.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(std::size_t steps = 64);

  std::size_t steps() const { return steps_; }
  // t in [1, T]
  double beta(std::size_t t) const;
  // t in [0, T]
  double alpha_bar(std::size_t t) const;

 private:
  std::size_t steps_;
  std::vector<double> betas_;      // index t, betas_[0] unused
  std::vector<double> alpha_bar_;  // index t
};

// sqrt(ab) z0 + sqrt(1 - ab) eps
template <typename T>
Tensor<T> add_noise(const NoiseSchedule& schedule, const Tensor<T>& z0, std::size_t t, const Tensor<T>& eps);

struct DenoiserConfig {
  std::size_t latent_channels = 12;
  std::size_t base_channels = 32;
  std::size_t levels = 2;
  std::size_t attention_levels = 3;  // bit i enables attention at level i
  std::size_t cond_width = 64;
  std::size_t steps = 64;

  void validate() const;
  bool attends(std::size_t level) const { return (attention_levels >> level) & 1u; }
  std::size_t channels(std::size_t level) const { return base_channels << level; }
};

template <typename T>
struct Conv {
  Tensor<T> weight;  // [(k*k*cin) x cout]
  Tensor<T> bias;
  std::size_t kernel = 3, stride = 1;

  static Conv make(ParamStore<T>& store, const std::string& name, const std::string& group, std::size_t cin,
                   std::size_t cout, std::size_t kernel, std::size_t stride);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

template <typename T>
struct ResBlock {
  GroupNorm<T> norm1, norm2;
  Conv<T> conv1, conv2;
  Linear<T> time;  // -> per-channel (scale, shift) after norm2
  Conv<T> skip;  // 1x1, only when channel counts differ
  bool has_skip = false;

  static ResBlock make(ParamStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
                       std::size_t time_width);
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& temb) const;
};

template <typename T>
struct AttnBlock {
  LayerNorm<T> norm;
  DecoupledAttention<T> attn;
  Linear<T> out;

  static AttnBlock make(ParamStore<T>& store, const std::string& name, std::size_t channels, std::size_t cond_width);
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& cond, const Tensor<T>& visual, T lambda) const;
};

template <typename T>
class Denoiser {
 public:
  static Denoiser make(ParamStore<T>& store, const DenoiserConfig& cfg);

  // z_t and src are [h x w x c]; an undefined src is the all-zero image-drop
  // block and an undefined `visual` skips the visual branch.
  // With a source the output is (z_t - sqrt(ab_t) src) / sqrt(1 - ab_t) plus
  // the network residual.
  Tensor<T> operator()(const Tensor<T>& z_t, const Tensor<T>& src, std::size_t t, const Tensor<T>& cond,
                       const Tensor<T>& visual, T lambda) const;

  const DenoiserConfig& config() const { return cfg_; }

 private:
  DenoiserConfig cfg_;
  NoiseSchedule schedule_;
  TimestepEmbedding<T> temb_;
  Conv<T> conv_in_;
  std::vector<ResBlock<T>> down_, up_;
  std::vector<AttnBlock<T>> down_attn_, up_attn_;
  std::vector<Conv<T>> downsample_;
  ResBlock<T> mid_;
  AttnBlock<T> mid_attn_;
  GroupNorm<T> norm_out_;
  Conv<T> conv_out_;
};

struct GuidanceScales {
  double image = 1.5;  // s_I
  double text = 7.5;   // s_T
};

// e00 + s_I (e10 - e00) + s_T (e11 - e10)
double cfg_combine(double e00, double e10, double e11, GuidanceScales scales);
template <typename T>
Tensor<T> cfg_predict(const Tensor<T>& e00, const Tensor<T>& e10, const Tensor<T>& e11, GuidanceScales scales);

struct DropDecision {
  bool image = false;
  bool text = false;
};

// Two independent Bernoulli draws, image first.
DropDecision condition_dropout(double p_img, double p_txt, Rng& rng);

}  // namespace fireedit
