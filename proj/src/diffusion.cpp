#include "fireedit/diffusion.hpp"

#include <cmath>

namespace fireedit {

NoiseSchedule::NoiseSchedule(std::size_t steps) : steps_(steps) {
  if (steps < 2) throw ConfigError("noise schedule needs at least 2 steps");
  const double k = 1000.0 / static_cast<double>(steps);
  const double lo = 1e-4 * k, hi = 2e-2 * k;
  if (hi >= 1.0) throw ConfigError("noise schedule with " + std::to_string(steps) + " steps has beta >= 1");
  betas_.assign(steps + 1, 0.0);
  alpha_bar_.assign(steps + 1, 1.0);
  for (std::size_t t = 1; t <= steps; ++t) {
    betas_[t] = lo + (hi - lo) * static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    alpha_bar_[t] = alpha_bar_[t - 1] * (1.0 - betas_[t]);
  }
}

double NoiseSchedule::beta(std::size_t t) const {
  if (t == 0 || t > steps_) throw ContractError("beta: timestep " + std::to_string(t) + " outside [1, T]");
  return betas_[t];
}

double NoiseSchedule::alpha_bar(std::size_t t) const {
  if (t > steps_) throw ContractError("alpha_bar: timestep " + std::to_string(t) + " outside [0, T]");
  return alpha_bar_[t];
}

template <typename T>
Tensor<T> add_noise(const NoiseSchedule& schedule, const Tensor<T>& z0, std::size_t t, const Tensor<T>& eps) {
  if (z0.shape() != eps.shape())
    throw DimensionError("add_noise: latent " + shape_str(z0.shape()) + " vs noise " + shape_str(eps.shape()));
  const double ab = schedule.alpha_bar(t);
  if (ab == 1.0) return z0;
  return add(scale(z0, static_cast<T>(std::sqrt(ab))), scale(eps, static_cast<T>(std::sqrt(1.0 - ab))));
}

void DenoiserConfig::validate() const {
  if (latent_channels == 0 || base_channels == 0 || levels == 0)
    throw ConfigError("denoiser channels and levels must be positive");
  if (base_channels % 2 != 0) throw ConfigError("denoiser base_channels must be even");
  if (cond_width == 0) throw ConfigError("denoiser cond_width must be positive");
}

template <typename T>
Conv<T> Conv<T>::make(ParamStore<T>& store, const std::string& name, const std::string& group, std::size_t cin,
                      std::size_t cout, std::size_t kernel, std::size_t stride) {
  Conv c;
  c.kernel = kernel;
  c.stride = stride;
  const std::size_t fan_in = kernel * kernel * cin;
  c.weight = store.add(name + ".weight", group, {fan_in, cout}, Init::normal, true,
                       1.0 / std::sqrt(static_cast<double>(fan_in)));
  c.bias = store.add(name + ".bias", group, {cout}, Init::zeros, true);
  return c;
}

template <typename T>
Tensor<T> Conv<T>::operator()(const Tensor<T>& x) const {
  return add_rowvec(conv2d(x, weight, kernel, stride, kernel / 2), bias);
}

template <typename T>
ResBlock<T> ResBlock<T>::make(ParamStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout,
                              std::size_t time_width) {
  ResBlock b;
  b.norm1 = GroupNorm<T>::make(store, name + ".norm1", "denoiser", cin, true);
  b.conv1 = Conv<T>::make(store, name + ".conv1", "denoiser", cin, cout, 3, 1);
  b.time = Linear<T>::make(store, name + ".time", "denoiser", time_width, 2 * cout, true);
  b.norm2 = GroupNorm<T>::make(store, name + ".norm2", "denoiser", cout, true);
  b.conv2 = Conv<T>::make(store, name + ".conv2", "denoiser", cout, cout, 3, 1);
  if (cin != cout) {
    b.skip = Conv<T>::make(store, name + ".skip", "denoiser", cin, cout, 1, 1);
    b.has_skip = true;
  }
  return b;
}

template <typename T>
Tensor<T> ResBlock<T>::operator()(const Tensor<T>& x, const Tensor<T>& temb) const {
  Tensor<T> h = conv1(gelu(norm1(x)));
  const std::size_t c = h.dim(2);
  // scale-shift: norm2(h) * (1 + scale(t)) + shift(t)
  const Tensor<T> mod = reshape(time(temb), {2 * c});
  const Tensor<T> gain = add(slice(mod, 0, 0, c), Tensor<T>::full({c}, T(1)));
  h = add_rowvec(mul_rowvec(norm2(h), gain), slice(mod, 0, c, 2 * c));
  h = conv2(gelu(h));
  return add(has_skip ? skip(x) : x, h);
}

template <typename T>
AttnBlock<T> AttnBlock<T>::make(ParamStore<T>& store, const std::string& name, std::size_t channels,
                                std::size_t cond_width) {
  AttnBlock a;
  a.norm = LayerNorm<T>::make(store, name + ".norm", "denoiser", channels, true);
  a.attn = DecoupledAttention<T>::make(store, name + ".attn", "denoiser", channels, cond_width, true);
  a.out = Linear<T>::make(store, name + ".out", "denoiser", channels, channels, true);
  return a;
}

template <typename T>
Tensor<T> AttnBlock<T>::operator()(const Tensor<T>& x, const Tensor<T>& cond, const Tensor<T>& visual,
                                   T lambda) const {
  const Shape shape = x.shape();
  const Tensor<T> z = reshape(x, {shape[0] * shape[1], shape[2]});
  const Tensor<T> attended = decoupled_cross_attention(attn, norm(z), cond, visual, lambda);
  return reshape(add(z, out(attended)), shape);
}

template <typename T>
Denoiser<T> Denoiser<T>::make(ParamStore<T>& store, const DenoiserConfig& cfg) {
  cfg.validate();
  Denoiser d;
  d.cfg_ = cfg;
  d.schedule_ = NoiseSchedule(cfg.steps);
  const std::size_t c0 = cfg.base_channels, tw = 2 * c0, top = cfg.levels - 1;
  d.temb_ = TimestepEmbedding<T>::make(store, "denoiser.temb", "denoiser", cfg.steps, c0, tw, true);
  d.conv_in_ = Conv<T>::make(store, "denoiser.conv_in", "denoiser", 2 * cfg.latent_channels, c0, 3, 1);
  for (std::size_t i = 0; i < cfg.levels; ++i) {
    const std::string p = "denoiser.down" + std::to_string(i);
    d.down_.push_back(ResBlock<T>::make(store, p + ".res", i == 0 ? c0 : cfg.channels(i), cfg.channels(i), tw));
    if (cfg.attends(i)) d.down_attn_.push_back(AttnBlock<T>::make(store, p + ".attn", cfg.channels(i), cfg.cond_width));
    else d.down_attn_.emplace_back();
    if (i < top)
      d.downsample_.push_back(
          Conv<T>::make(store, p + ".downsample", "denoiser", cfg.channels(i), cfg.channels(i + 1), 3, 2));
  }
  d.mid_ = ResBlock<T>::make(store, "denoiser.mid.res", cfg.channels(top), cfg.channels(top), tw);
  if (cfg.attends(top)) d.mid_attn_ = AttnBlock<T>::make(store, "denoiser.mid.attn", cfg.channels(top), cfg.cond_width);
  d.up_.resize(cfg.levels);
  d.up_attn_.resize(cfg.levels);
  for (std::size_t i = cfg.levels; i-- > 0;) {
    const std::string p = "denoiser.up" + std::to_string(i);
    const std::size_t below = i == top ? cfg.channels(top) : cfg.channels(i + 1);
    d.up_[i] = ResBlock<T>::make(store, p + ".res", below + cfg.channels(i), cfg.channels(i), tw);
    if (cfg.attends(i)) d.up_attn_[i] = AttnBlock<T>::make(store, p + ".attn", cfg.channels(i), cfg.cond_width);
  }
  d.norm_out_ = GroupNorm<T>::make(store, "denoiser.norm_out", "denoiser", c0, true);
  d.conv_out_ = Conv<T>::make(store, "denoiser.conv_out", "denoiser", c0, cfg.latent_channels, 3, 1);
  return d;
}

template <typename T>
Tensor<T> Denoiser<T>::operator()(const Tensor<T>& z_t, const Tensor<T>& src, std::size_t t, const Tensor<T>& cond,
                                  const Tensor<T>& visual, T lambda) const {
  if (z_t.rank() != 3 || z_t.dim(2) != cfg_.latent_channels)
    throw DimensionError("denoiser: latent " + shape_str(z_t.shape()) + " does not have " +
                         std::to_string(cfg_.latent_channels) + " channels");
  const std::size_t scale_div = std::size_t{1} << (cfg_.levels - 1);
  if (z_t.dim(0) % scale_div != 0 || z_t.dim(1) % scale_div != 0)
    throw DimensionError("denoiser: latent " + shape_str(z_t.shape()) + " is not divisible by " +
                         std::to_string(scale_div));
  if (src.defined() && src.shape() != z_t.shape())
    throw DimensionError("denoiser: source latent " + shape_str(src.shape()) + " vs " + shape_str(z_t.shape()));
  const Tensor<T> source = src.defined() ? src : Tensor<T>::zeros(z_t.shape());
  const Tensor<T> temb = temb_(t);

  Tensor<T> h = conv_in_(concat<T>({z_t, source}, 2));
  std::vector<Tensor<T>> skips;
  for (std::size_t i = 0; i < cfg_.levels; ++i) {
    h = down_[i](h, temb);
    if (cfg_.attends(i)) h = down_attn_[i](h, cond, visual, lambda);
    skips.push_back(h);
    if (i + 1 < cfg_.levels) h = downsample_[i](h);
  }
  h = mid_(h, temb);
  if (cfg_.attends(cfg_.levels - 1)) h = mid_attn_(h, cond, visual, lambda);
  for (std::size_t i = cfg_.levels; i-- > 0;) {
    h = up_[i](concat<T>({h, skips[i]}, 2), temb);
    if (cfg_.attends(i)) h = up_attn_[i](h, cond, visual, lambda);
    if (i > 0) h = upsample2x(h);
  }
  const Tensor<T> residual = conv_out_(gelu(norm_out_(h)));
  if (!src.defined()) return residual;
  const T ab = static_cast<T>(schedule_.alpha_bar(t));
  const T inv_sigma = T(1) / std::sqrt(T(1) - ab);
  return add(residual, scale(sub(z_t, scale(src, std::sqrt(ab))), inv_sigma));
}

double cfg_combine(double e00, double e10, double e11, GuidanceScales scales) {
  return e00 + scales.image * (e10 - e00) + scales.text * (e11 - e10);
}

template <typename T>
Tensor<T> cfg_predict(const Tensor<T>& e00, const Tensor<T>& e10, const Tensor<T>& e11, GuidanceScales scales) {
  if (e00.shape() != e10.shape() || e00.shape() != e11.shape())
    throw DimensionError("cfg_predict: branch shapes " + shape_str(e00.shape()) + ", " + shape_str(e10.shape()) +
                         ", " + shape_str(e11.shape()));
  std::vector<T> out(e00.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(cfg_combine(e00[i], e10[i], e11[i], scales));
  return Tensor<T>(e00.shape(), std::move(out));
}

DropDecision condition_dropout(double p_img, double p_txt, Rng& rng) {
  if (!(p_img >= 0.0 && p_img <= 1.0) || !(p_txt >= 0.0 && p_txt <= 1.0))
    throw ContractError("condition_dropout: probabilities must lie in [0, 1]");
  DropDecision d;
  d.image = rng.bernoulli(p_img);
  d.text = rng.bernoulli(p_txt);
  return d;
}

#define FIREEDIT_INSTANTIATE(T)                                                                          \
  template Tensor<T> add_noise<T>(const NoiseSchedule&, const Tensor<T>&, std::size_t, const Tensor<T>&); \
  template struct Conv<T>;                                                                               \
  template struct ResBlock<T>;                                                                           \
  template struct AttnBlock<T>;                                                                          \
  template class Denoiser<T>;                                                                            \
  template Tensor<T> cfg_predict<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, GuidanceScales);

FIREEDIT_INSTANTIATE(float)
FIREEDIT_INSTANTIATE(double)

#undef FIREEDIT_INSTANTIATE

}  // namespace fireedit
