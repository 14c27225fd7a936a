#include "fireedit/model.hpp"

#include <algorithm>
#include <cmath>

namespace fireedit {

const char* edit_kind_name(EditKind kind) {
  switch (kind) {
    case EditKind::add: return "add";
    case EditKind::remove: return "remove";
    case EditKind::change_color: return "change-color";
  }
  return "?";
}

VlmConfig ModelConfig::vlm() const {
  VlmConfig c;
  c.width = vlm_width;
  c.layers = vlm_layers;
  c.heads = vlm_heads;
  c.vocab_size = vocab_size;
  c.img_tokens = img_tokens;
  c.lora_rank = lora_rank;
  c.lora_alpha = lora_alpha;
  c.feature_width = feature_width;
  c.image_patch = vlm_patch;
  c.region_grid = region_grid;
  c.region_positional = region_positional;
  return c;
}

QFormerConfig ModelConfig::qformer() const { return QFormerConfig{qformer_queries, qformer_depth, cond_width, cond_heads}; }

TatiConfig ModelConfig::tati() const { return TatiConfig{tati_units, tati_queries, cond_width, cond_heads, steps}; }

HvcaConfig ModelConfig::hvca() const {
  return HvcaConfig{hvca_blocks, hvca_queries, cond_width, cond_heads, hybrid_width};
}

DenoiserConfig ModelConfig::denoiser() const {
  DenoiserConfig c;
  c.latent_channels = 3 * latent_factor * latent_factor;
  c.base_channels = unet_channels;
  c.levels = unet_levels;
  c.attention_levels = unet_attention;
  c.cond_width = cond_width;
  c.steps = steps;
  return c;
}

void ModelConfig::validate() const {
  if (image_size == 0 || latent_factor == 0 || patch == 0 || vlm_patch == 0)
    throw ConfigError("image_size, latent_factor and patch must be positive");
  if (image_size % (2 * patch) != 0)
    throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by the coarse patch " +
                      std::to_string(2 * patch));
  if (image_size % latent_factor != 0)
    throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by latent_factor " +
                      std::to_string(latent_factor));
  if (unet_levels == 0 || latent_size() % (std::size_t{1} << (unet_levels - 1)) != 0)
    throw ConfigError("latent size " + std::to_string(latent_size()) + " does not support " +
                      std::to_string(unet_levels) + " denoiser levels");
  if (!std::isfinite(lambda)) throw ConfigError("lambda must be finite");
  vlm().validate();
  qformer().validate();
  tati().validate();
  hvca().validate();
  denoiser().validate();
}

template <typename T>
EditModel<T>::EditModel(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), store_(seed), codec_(cfg.latent_factor), schedule_(cfg.steps) {
  cfg_.validate();
  const std::size_t s = cfg.image_size;
  vlm_ = Vlm<T>::make(store_, cfg.vlm(), s, s);
  qformer_ = QFormer<T>::make(store_, cfg.qformer(), cfg.img_tokens, cfg.vlm_width);
  tati_ = Tati<T>::make(store_, cfg.tati());
  hybrid_ = HybridEncoder<T>::make(store_, "hybrid", "hybrid", s, s, cfg.patch, cfg.hybrid_width, true);
  hvca_ = Hvca<T>::make(store_, cfg.hvca());
  denoiser_ = Denoiser<T>::make(store_, cfg.denoiser());
  null_text_ = store_.add("null.text", "null", {cfg.qformer_queries, cfg.cond_width}, Init::normal, true, 1.0);
  null_visual_ = store_.add("null.visual", "null", {cfg.hvca_queries, cfg.cond_width}, Init::normal, true, 1.0);
}

template <typename T>
TrainDraw<T> EditModel<T>::draw(Rng& rng, double p_img, double p_txt) const {
  TrainDraw<T> d;
  d.drop = condition_dropout(p_img, p_txt, rng);
  d.t = static_cast<std::size_t>(rng.between(1, cfg_.steps));
  const std::size_t n = cfg_.latent_size();
  const std::size_t c = codec_.channels();
  std::vector<T> eps(n * n * c);
  for (T& v : eps) v = static_cast<T>(rng.normal());
  d.eps = Tensor<T>({n, n, c}, std::move(eps));
  return d;
}

template <typename T>
TextCondition<T> EditModel<T>::encode_text(const Tensor<T>& source, const TokenSequence& instruction,
                                           const RegionSet& boxes) const {
  TextCondition<T> c;
  const VlmOutput<T> out = vlm_.run(source, instruction, boxes, cfg_.use_region);
  c.logits = out.logits;
  c.e = extract_edit_states(out.hidden, cfg_.img_tokens);
  c.e_t = qformer_.bridge(c.e);
  return c;
}

template <typename T>
Tensor<T> EditModel<T>::visual(const Tensor<T>& source, const Tensor<T>& text) const {
  if (!cfg_.use_hvca) return Tensor<T>();
  return hvca_(hybrid_.encode(source), text);
}

template <typename T>
Tensor<T> EditModel<T>::condition(const Tensor<T>& e_t, std::size_t t) const {
  return cfg_.use_tati ? tati_(e_t, t) : e_t;
}

template <typename T>
LossParts<T> EditModel<T>::losses(const DatasetRecord& record, const TrainDraw<T>& draw) const {
  const Tensor<T> source = image_tensor<T>(record.source);
  LossParts<T> parts;
  Tensor<T> e_t = null_text_;
  if (!draw.drop.text) {
    const TextCondition<T> text = encode_text(source, record.instruction, record.boxes);
    parts.vlm = loss_vlm(text.logits, cfg_.img_tokens, cfg_.vocab_size);
    parts.vlm_active = true;
    e_t = text.e_t;
  } else {
    parts.vlm = Tensor<T>::zeros({1});
  }
  Tensor<T> v;
  if (cfg_.use_hvca) v = draw.drop.image ? null_visual_ : visual(source, e_t);

  const Tensor<T> z0 = codec_.encode(image_tensor<T>(record.target));
  const Tensor<T> src_latent = draw.drop.image ? Tensor<T>() : codec_.encode(source);
  const Tensor<T> z_t = add_noise(schedule_, z0, draw.t, draw.eps);
  // the sampler never asks for (no image, instruction), so an image drop also nulls the instruction
  const Tensor<T> cond = condition(draw.drop.image ? null_text_ : e_t, draw.t);
  const Tensor<T> eps_hat = denoiser_(z_t, src_latent, draw.t, cond, v, static_cast<T>(cfg_.lambda));
  parts.diff = mse(draw.eps, eps_hat);
  parts.total = add(parts.vlm, parts.diff);
  return parts;
}

template <typename T>
Image EditModel<T>::sample(const Image& source, const TokenSequence& instruction, const RegionSet& boxes,
                           const SampleOptions& options) const {
  const std::size_t steps = options.steps;
  if (steps == 0 || steps > cfg_.steps)
    throw ContractError("sample: steps " + std::to_string(steps) + " outside [1, " + std::to_string(cfg_.steps) + "]");
  const GuidanceScales sc = options.scales;
  const bool need_full = sc.text != 0.0;
  const bool need_image = need_full || sc.image != 0.0;

  const Tensor<T> src = image_tensor<T>(source);
  const Tensor<T> src_latent = codec_.encode(src);
  Tensor<T> e_t, v_full, v_image;
  if (need_full) {
    e_t = encode_text(src, instruction, boxes).e_t;
    v_full = visual(src, e_t);
  }
  if (need_image) v_image = visual(src, null_text_);
  const Tensor<T> v_null = cfg_.use_hvca ? null_visual_ : Tensor<T>();
  const T lambda = static_cast<T>(cfg_.lambda);

  Rng rng(options.seed);
  const Shape shape{cfg_.latent_size(), cfg_.latent_size(), codec_.channels()};
  const auto gaussian = [&] {
    std::vector<T> v(shape_numel(shape));
    for (T& x : v) x = static_cast<T>(rng.normal());
    return Tensor<T>(shape, std::move(v));
  };
  Tensor<T> z = gaussian();
  Tensor<T> x0, last;
  for (std::size_t k = steps; k >= 1; --k) {
    const std::size_t t = (k * cfg_.steps + steps / 2) / steps;
    const std::size_t t_prev = ((k - 1) * cfg_.steps + steps / 2) / steps;
    const Tensor<T> cond_null = condition(null_text_, t);
    const Tensor<T> e00 = denoiser_(z, Tensor<T>(), t, cond_null, v_null, lambda);
    const Tensor<T> e10 = need_image ? denoiser_(z, src_latent, t, cond_null, v_image, lambda) : e00;
    const Tensor<T> e11 = need_full ? denoiser_(z, src_latent, t, condition(e_t, t), v_full, lambda) : e10;
    const Tensor<T> eps = cfg_predict(e00, e10, e11, sc);

    const double ab = schedule_.alpha_bar(t), ab_prev = schedule_.alpha_bar(t_prev);
    std::vector<T> x0v(z.size());
    for (std::size_t i = 0; i < x0v.size(); ++i)
      x0v[i] = static_cast<T>((z[i] - std::sqrt(1.0 - ab) * eps[i]) / std::sqrt(ab));
    const Tensor<T> pixels = codec_.decode(Tensor<T>(shape, std::move(x0v)));
    std::vector<T> clipped(pixels.data().begin(), pixels.data().end());
    for (T& p : clipped) p = std::clamp(p, T(0), T(1));
    last = Tensor<T>(pixels.shape(), std::move(clipped));
    x0 = codec_.encode(last);
    if (t_prev == 0) break;

    const double beta = 1.0 - ab / ab_prev;
    const double c_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double c_z = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
    const Tensor<T> noise = gaussian();
    std::vector<T> next(z.size());
    for (std::size_t i = 0; i < next.size(); ++i)
      next[i] = static_cast<T>(c_x0 * x0[i] + c_z * z[i] + sigma * noise[i]);
    z = Tensor<T>(shape, std::move(next));
  }
  return tensor_image(last);
}

template <typename T>
std::vector<std::size_t> EditModel<T>::greedy_slots(const DatasetRecord& record) const {
  return vlm_.greedy_slots(image_tensor<T>(record.source), record.instruction, record.boxes, cfg_.use_region);
}

template class EditModel<float>;
template class EditModel<double>;

}  // namespace fireedit
