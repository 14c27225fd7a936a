#include "fireedit/conditioning.hpp"

#include <cmath>

namespace fireedit {

template <typename T>
TimestepEmbedding<T> TimestepEmbedding<T>::make(ParamStore<T>& store, const std::string& name,
                                                const std::string& group, std::size_t steps, std::size_t width,
                                                std::size_t out_width, bool trainable) {
  if (width % 2 != 0) throw ConfigError("timestep embedding width must be even");
  TimestepEmbedding e;
  e.steps = steps;
  e.width = width;
  e.l1 = Linear<T>::make(store, name + ".l1", group, width, out_width, trainable);
  e.l2 = Linear<T>::make(store, name + ".l2", group, out_width, out_width, trainable);
  return e;
}

template <typename T>
Tensor<T> TimestepEmbedding<T>::operator()(std::size_t t) const {
  if (t > steps)
    throw ContractError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps) + "]");
  const Tensor<T> code = reshape(sinusoidal_embedding<T>(static_cast<double>(t), width), {1, width});
  return l2(gelu(l1(code)));
}

void TatiConfig::validate() const {
  if (units == 0 || queries == 0) throw ConfigError("tati needs at least one unit and one query");
  if (width == 0 || heads == 0 || width % heads != 0 || width % 2 != 0)
    throw ConfigError("tati width " + std::to_string(width) + " must be even and divisible by " +
                      std::to_string(heads) + " heads");
  if (steps == 0) throw ConfigError("tati needs a positive schedule length");
}

template <typename T>
Tensor<T> adaptive_layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  const std::size_t d = x.shape().back();
  const Tensor<T> g = add(reshape(gamma, {d}), Tensor<T>::full({d}, T(1)));
  return add_rowvec(mul_rowvec(layer_norm(x, Tensor<T>(), Tensor<T>()), g), reshape(beta, {d}));
}

template <typename T>
Tati<T> Tati<T>::make(ParamStore<T>& store, const TatiConfig& cfg) {
  cfg.validate();
  Tati m;
  m.cfg_ = cfg;
  const std::size_t w = cfg.width;
  m.temb_ = TimestepEmbedding<T>::make(store, "tati.temb", "tati", cfg.steps, w, w, true);
  m.queries_ = store.add("tati.queries", "tati", {cfg.queries, w}, Init::normal, true,
                         1.0 / std::sqrt(static_cast<double>(w)));
  for (std::size_t i = 0; i < cfg.units; ++i) {
    const std::string p = "tati.unit" + std::to_string(i);
    TatiUnit<T> u;
    u.mod1 = Linear<T>::make(store, p + ".mod1", "tati", w, w, true);
    u.mod2 = Linear<T>::make(store, p + ".mod2", "tati", w, 4 * w, true, true, true);
    u.ln_context = LayerNorm<T>::make(store, p + ".ln_context", "tati", w, true);
    u.cross_attn = Attention<T>::make(store, p + ".cross", "tati", w, w, w, cfg.heads, true);
    u.ffn = FeedForward<T>::make(store, p + ".ffn", "tati", w, 4 * w, true);
    m.units_.push_back(u);
  }
  m.ln_out_ = LayerNorm<T>::make(store, "tati.ln_out", "tati", w, true);
  return m;
}

template <typename T>
Tensor<T> Tati<T>::operator()(const Tensor<T>& e_t, std::size_t t) const {
  if (t > cfg_.steps)
    throw ContractError("tati: timestep " + std::to_string(t) + " outside [0, " + std::to_string(cfg_.steps) + "]");
  const std::size_t w = cfg_.width;
  const Tensor<T> temb = temb_(t);
  Tensor<T> x = queries_;
  for (const TatiUnit<T>& u : units_) {
    const Tensor<T> mod = u.mod2(gelu(u.mod1(temb)));
    const Tensor<T> h = adaptive_layer_norm(x, slice(mod, 1, 0, w), slice(mod, 1, w, 2 * w));
    x = add(x, u.cross_attn(h, u.ln_context(e_t)));
    const Tensor<T> h2 = adaptive_layer_norm(x, slice(mod, 1, 2 * w, 3 * w), slice(mod, 1, 3 * w, 4 * w));
    x = add(x, u.ffn(h2));
  }
  return ln_out_(x);
}

void HvcaConfig::validate() const {
  if (blocks == 0 || queries == 0) throw ConfigError("hvca needs at least one block and one query");
  if (width == 0 || heads == 0 || width % heads != 0)
    throw ConfigError("hvca width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  if (visual_width == 0) throw ConfigError("hvca visual width must be positive");
}

template <typename T>
Hvca<T> Hvca<T>::make(ParamStore<T>& store, const HvcaConfig& cfg) {
  cfg.validate();
  Hvca m;
  m.cfg_ = cfg;
  const std::size_t w = cfg.width, dv = cfg.visual_width;
  m.queries_ = store.add("hvca.queries", "hvca", {cfg.queries, w}, Init::normal, true,
                         1.0 / std::sqrt(static_cast<double>(w)));
  for (std::size_t i = 0; i < cfg.blocks; ++i) {
    const std::string p = "hvca.block" + std::to_string(i);
    HvcaBlock<T> b;
    b.ln_visual_q = LayerNorm<T>::make(store, p + ".ln_visual_q", "hvca", w, true);
    b.ln_visual = LayerNorm<T>::make(store, p + ".ln_visual", "hvca", dv, true);
    b.visual_attn = Attention<T>::make(store, p + ".visual", "hvca", w, dv, w, cfg.heads, true);
    b.ln_text_q = LayerNorm<T>::make(store, p + ".ln_text_q", "hvca", w, true);
    b.ln_text = LayerNorm<T>::make(store, p + ".ln_text", "hvca", w, true);
    b.text_attn = Attention<T>::make(store, p + ".text", "hvca", w, w, w, cfg.heads, true);
    b.ln_ffn = LayerNorm<T>::make(store, p + ".ln_ffn", "hvca", w, true);
    b.ffn = FeedForward<T>::make(store, p + ".ffn", "hvca", w, 4 * w, true);
    m.blocks_.push_back(b);
  }
  m.ln_out_ = LayerNorm<T>::make(store, "hvca.ln_out", "hvca", w, true);
  return m;
}

template <typename T>
Tensor<T> Hvca<T>::operator()(const Tensor<T>& hybrid, const Tensor<T>& text) const {
  Tensor<T> x = queries_;
  for (const HvcaBlock<T>& b : blocks_) {
    x = add(x, b.visual_attn(b.ln_visual_q(x), b.ln_visual(hybrid)));
    x = add(x, b.text_attn(b.ln_text_q(x), b.ln_text(text)));
    x = add(x, b.ffn(b.ln_ffn(x)));
  }
  return ln_out_(x);
}

template <typename T>
DecoupledAttention<T> DecoupledAttention<T>::make(ParamStore<T>& store, const std::string& name,
                                                  const std::string& group, std::size_t query_width,
                                                  std::size_t cond_width, bool trainable) {
  DecoupledAttention a;
  a.q = Linear<T>::make(store, name + ".q", group, query_width, query_width, trainable, false);
  a.k_text = Linear<T>::make(store, name + ".k_text", group, cond_width, query_width, trainable, false);
  a.v_text = Linear<T>::make(store, name + ".v_text", group, cond_width, query_width, trainable, false);
  a.k_visual = Linear<T>::make(store, name + ".k_visual", group, cond_width, query_width, trainable, false);
  a.v_visual = Linear<T>::make(store, name + ".v_visual", group, cond_width, query_width, trainable, false);
  return a;
}

namespace {

template <typename T>
void check_cond(const char* what, const Tensor<T>& c, std::size_t width) {
  if (c.rank() != 2 || c.dim(1) != width)
    throw DimensionError(std::string("decoupled attention: ") + what + " " + shape_str(c.shape()) +
                         " does not have width " + std::to_string(width));
}

}  // namespace

template <typename T>
DecoupledBranches<T> decoupled_branches(const DecoupledAttention<T>& p, const Tensor<T>& z, const Tensor<T>& cond,
                                        const Tensor<T>& visual) {
  check_cond("text condition", cond, p.k_text.weight.dim(0));
  const Tensor<T> q = p.q(z);
  DecoupledBranches<T> out;
  out.text = multi_head_attention(q, p.k_text(cond), p.v_text(cond), 1);
  if (visual.defined()) {
    check_cond("visual condition", visual, p.k_visual.weight.dim(0));
    out.visual = multi_head_attention(q, p.k_visual(visual), p.v_visual(visual), 1);
  }
  return out;
}

template <typename T>
Tensor<T> decoupled_cross_attention(const DecoupledAttention<T>& p, const Tensor<T>& z, const Tensor<T>& cond,
                                    const Tensor<T>& visual, T lambda) {
  if (!std::isfinite(static_cast<double>(lambda))) throw ContractError("decoupled attention: lambda is not finite");
  const DecoupledBranches<T> b = decoupled_branches(p, z, cond, lambda == T(0) ? Tensor<T>() : visual);
  if (!b.visual.defined()) return b.text;
  return add(b.text, scale(b.visual, lambda));
}

#define FIREEDIT_INSTANTIATE(T)                                                                                  \
  template struct TimestepEmbedding<T>;                                                                          \
  template Tensor<T> adaptive_layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template class Tati<T>;                                                                                        \
  template class Hvca<T>;                                                                                        \
  template struct DecoupledAttention<T>;                                                                         \
  template DecoupledBranches<T> decoupled_branches<T>(const DecoupledAttention<T>&, const Tensor<T>&,            \
                                                      const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> decoupled_cross_attention<T>(const DecoupledAttention<T>&, const Tensor<T>&,                \
                                                  const Tensor<T>&, const Tensor<T>&, T);

FIREEDIT_INSTANTIATE(float)
FIREEDIT_INSTANTIATE(double)

#undef FIREEDIT_INSTANTIATE

}  // namespace fireedit
