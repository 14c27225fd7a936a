#include "fireedit/vlm.hpp"

#include <cmath>

namespace fireedit {

TokenSequence TokenSequence::text(std::vector<std::size_t> ids) {
  TokenSequence s;
  s.segments.assign(ids.size(), Segment::text);
  s.ids = std::move(ids);
  return s;
}

void VlmConfig::validate() const {
  if (width == 0 || heads == 0 || width % heads != 0)
    throw ConfigError("vlm width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  if (lora_rank == 0) throw ConfigError("vlm lora_rank must be at least 1");
  if (img_tokens == 0) throw ConfigError("vlm img_tokens must be at least 1");
  if (layers == 0 || vocab_size == 0 || feature_width == 0 || region_grid == 0)
    throw ConfigError("vlm layers, vocab_size, feature_width and region_grid must be positive");
  if (width % 2 != 0) throw ConfigError("vlm width must be even for the positional encoding");
}

template <typename T>
LoraLinear<T> LoraLinear<T>::make(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                                  std::size_t rank, double alpha) {
  LoraLinear l;
  l.base = Linear<T>::make(store, name, "vlm.base", in, out, false, false);
  l.down = store.add(name + ".lora_a", "vlm.lora", {in, rank}, Init::normal, true,
                     1.0 / std::sqrt(static_cast<double>(in)));
  l.up = store.add(name + ".lora_b", "vlm.lora", {rank, out}, Init::zeros, true);
  l.factor = static_cast<T>(alpha / static_cast<double>(rank));
  return l;
}

template <typename T>
Tensor<T> LoraLinear<T>::operator()(const Tensor<T>& x, bool adapted) const {
  const Tensor<T> y = base(x);
  if (!adapted) return y;
  return add(y, scale(matmul(matmul(x, down), up), factor));
}

template <typename T>
Vlm<T> Vlm<T>::make(ParamStore<T>& store, const VlmConfig& cfg, std::size_t image_h, std::size_t image_w) {
  cfg.validate();
  Vlm m;
  m.cfg_ = cfg;
  const std::size_t d = cfg.width;
  m.vision_ = PatchEncoder<T>::make(store, "vlm.vision", "vlm.vision", image_h, image_w, cfg.image_patch,
                                    cfg.feature_width, false);
  m.regions_ = RegionEncoder<T>::make(store, "vlm.region", "vlm.region", cfg.feature_width, cfg.region_grid, d, true);
  m.adapter1_ = Linear<T>::make(store, "vlm.adapter.0", "vlm.adapter", cfg.feature_width, d, true);
  m.adapter2_ = Linear<T>::make(store, "vlm.adapter.1", "vlm.adapter", d, d, true);
  m.tok_emb_ = store.add("vlm.tok_emb", "vlm.base", {cfg.vocab_size, d}, Init::normal, false, 0.1);
  m.expansion_ = store.add("vlm.expansion", "vlm.expansion", {cfg.img_tokens, d}, Init::normal, true, 0.1);
  for (std::size_t i = 0; i < cfg.layers; ++i) {
    const std::string p = "vlm.layer" + std::to_string(i);
    VlmBlock<T> b;
    b.ln1 = LayerNorm<T>::make(store, p + ".ln1", "vlm.base", d, false);
    b.q = LoraLinear<T>::make(store, p + ".attn.q", d, d, cfg.lora_rank, cfg.lora_alpha);
    b.k = Linear<T>::make(store, p + ".attn.k", "vlm.base", d, d, false, false);
    b.v = LoraLinear<T>::make(store, p + ".attn.v", d, d, cfg.lora_rank, cfg.lora_alpha);
    b.o = Linear<T>::make(store, p + ".attn.o", "vlm.base", d, d, false);
    b.ln2 = LayerNorm<T>::make(store, p + ".ln2", "vlm.base", d, false);
    b.ffn = FeedForward<T>::make(store, p + ".ffn", "vlm.base", d, 4 * d, false);
    m.blocks_.push_back(b);
  }
  m.ln_f_ = LayerNorm<T>::make(store, "vlm.ln_f", "vlm.base", d, false);
  return m;
}

template <typename T>
Tensor<T> Vlm<T>::prefix_rows(const TokenSequence& text, const FeatureMap<T>& image, const Tensor<T>& regions,
                              TokenSequence& seq) const {
  const std::size_t d = cfg_.width;
  for (std::size_t id : text.ids)
    if (id >= cfg_.vocab_size)
      throw ContractError("instruction id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(cfg_.vocab_size));
  if (image.width() != cfg_.feature_width)
    throw DimensionError("image features have width " + std::to_string(image.width()) + ", adapter expects " +
                         std::to_string(cfg_.feature_width));
  if (regions.rank() != 2 || regions.dim(1) != d)
    throw DimensionError("region tokens " + shape_str(regions.shape()) + " do not match width " + std::to_string(d));
  const Tensor<T> txt = embedding(tok_emb_, text.ids);
  const Tensor<T> img = adapter2_(gelu(adapter1_(image.values)));
  const std::size_t n_img = img.dim(0), n_reg = regions.dim(0);
  seq = TokenSequence::text(text.ids);
  seq.ids.resize(seq.ids.size() + n_img + n_reg, 0);
  seq.segments.insert(seq.segments.end(), n_img, Segment::image);
  seq.segments.insert(seq.segments.end(), n_reg, Segment::region);
  return concat<T>({txt, img, regions}, 0);
}

template <typename T>
Tensor<T> Vlm<T>::with_positions(const Tensor<T>& rows, const TokenSequence& seq) const {
  Tensor<T> pe = sinusoidal_table<T>(seq.size(), cfg_.width);
  if (!cfg_.region_positional) {
    std::vector<T> v(pe.data().begin(), pe.data().end());
    for (std::size_t i = 0; i < seq.size(); ++i)
      if (seq.segments[i] == Segment::region) std::fill_n(v.begin() + i * cfg_.width, cfg_.width, T(0));
    pe = Tensor<T>(pe.shape(), std::move(v));
  }
  return add(rows, pe);
}

template <typename T>
Assembled<T> Vlm<T>::assemble_input(const TokenSequence& text, const FeatureMap<T>& image, const Tensor<T>& regions,
                                    std::size_t r) const {
  if (r != cfg_.img_tokens)
    throw ContractError("assemble_input: r=" + std::to_string(r) + " but the model has " +
                        std::to_string(cfg_.img_tokens) + " img tokens");
  Assembled<T> a;
  const Tensor<T> prefix = prefix_rows(text, image, regions, a.seq);
  for (std::size_t i = 0; i < r; ++i) {
    a.seq.ids.push_back(cfg_.vocab_size + i);
    a.seq.segments.push_back(Segment::img_slot);
  }
  a.h = with_positions(concat<T>({prefix, expansion_}, 0), a.seq);
  return a;
}

template <typename T>
VlmOutput<T> Vlm<T>::forward_causal(const Tensor<T>& h) const {
  if (h.rank() != 2 || h.dim(1) != cfg_.width)
    throw DimensionError("forward_causal: input " + shape_str(h.shape()) + " does not have width " +
                         std::to_string(cfg_.width));
  if (h.dim(0) < cfg_.img_tokens)
    throw ContractError("forward_causal: sequence of " + std::to_string(h.dim(0)) + " rows is shorter than r");
  Tensor<T> x = h;
  for (const VlmBlock<T>& b : blocks_) {
    const Tensor<T> n = b.ln1(x);
    x = add(x, b.o(multi_head_attention(b.q(n, adapted_), b.k(n), b.v(n, adapted_), cfg_.heads, true)));
    x = add(x, b.ffn(b.ln2(x)));
  }
  VlmOutput<T> out;
  out.hidden = ln_f_(x);
  out.logits = matmul_bt(out.hidden, concat<T>({tok_emb_, expansion_}, 0));
  return out;
}

template <typename T>
VlmOutput<T> Vlm<T>::run(const Tensor<T>& image, const TokenSequence& text, const RegionSet& regions,
                         bool use_regions) const {
  const FeatureMap<T> fm = image_features(image);
  const Tensor<T> p = use_regions ? region_tokens(fm, regions) : Tensor<T>::zeros({0, cfg_.width});
  return forward_causal(assemble_input(text, fm, p, cfg_.img_tokens).h);
}

template <typename T>
std::vector<std::size_t> Vlm<T>::greedy_slots(const Tensor<T>& image, const TokenSequence& text,
                                              const RegionSet& regions, bool use_regions) const {
  const FeatureMap<T> fm = image_features(image);
  const Tensor<T> p = use_regions ? region_tokens(fm, regions) : Tensor<T>::zeros({0, cfg_.width});
  TokenSequence seq;
  Tensor<T> rows = prefix_rows(text, fm, p, seq);
  const Tensor<T> table = concat<T>({tok_emb_, expansion_}, 0);
  std::vector<std::size_t> predicted;
  for (std::size_t step = 0; step < cfg_.img_tokens; ++step) {
    const VlmOutput<T> out = forward_causal(with_positions(rows, seq));
    const Tensor<T> last = slice(out.logits, 0, seq.size() - 1, seq.size());
    std::size_t best = 0;
    for (std::size_t j = 1; j < last.size(); ++j)
      if (last[j] > last[best]) best = j;
    predicted.push_back(best);
    const std::size_t ids[1] = {best};
    rows = concat<T>({rows, embedding(table, ids)}, 0);
    seq.ids.push_back(best);
    seq.segments.push_back(best >= cfg_.vocab_size ? Segment::img_slot : Segment::text);
  }
  return predicted;
}

template <typename T>
Tensor<T> loss_vlm(const Tensor<T>& logits, std::size_t r, std::size_t vocab_size) {
  if (r == 0) throw ContractError("loss_vlm: r must be positive");
  if (logits.rank() != 2 || logits.dim(0) < r + 1 || logits.dim(1) < vocab_size + r)
    throw ContractError("loss_vlm: logits " + shape_str(logits.shape()) + " cannot hold " + std::to_string(r) +
                        " slot predictions over vocabulary " + std::to_string(vocab_size));
  const std::size_t len = logits.dim(0);
  std::vector<std::size_t> targets(r);
  for (std::size_t i = 0; i < r; ++i) targets[i] = vocab_size + i;
  return cross_entropy_from_logits(slice(logits, 0, len - r - 1, len - 1), targets);
}

template <typename T>
Tensor<T> extract_edit_states(const Tensor<T>& hidden, std::size_t r) {
  if (hidden.rank() != 2 || hidden.dim(0) < r)
    throw ContractError("extract_edit_states: hidden " + shape_str(hidden.shape()) + " has fewer than " +
                        std::to_string(r) + " rows");
  return slice(hidden, 0, hidden.dim(0) - r, hidden.dim(0));
}

#define FIREEDIT_INSTANTIATE(T)                                                  \
  template struct LoraLinear<T>;                                                 \
  template class Vlm<T>;                                                         \
  template Tensor<T> loss_vlm<T>(const Tensor<T>&, std::size_t, std::size_t);    \
  template Tensor<T> extract_edit_states<T>(const Tensor<T>&, std::size_t);

FIREEDIT_INSTANTIATE(float)
FIREEDIT_INSTANTIATE(double)

#undef FIREEDIT_INSTANTIATE

}  // namespace fireedit
