#include "fireedit/qformer.hpp"

#include <cmath>

namespace fireedit {

void QFormerConfig::validate() const {
  if (queries == 0 || depth == 0) throw ConfigError("qformer needs at least one query and one block");
  if (width == 0 || heads == 0 || width % heads != 0)
    throw ConfigError("qformer width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) +
                      " heads");
}

template <typename T>
QFormer<T> QFormer<T>::make(ParamStore<T>& store, const QFormerConfig& cfg, std::size_t input_rows,
                            std::size_t input_width) {
  cfg.validate();
  QFormer q;
  q.cfg_ = cfg;
  q.input_rows_ = input_rows;
  const std::size_t w = cfg.width;
  q.queries_ = store.add("qformer.queries", "qformer", {cfg.queries, w}, Init::normal, true,
                         1.0 / std::sqrt(static_cast<double>(w)));
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const std::string p = "qformer.block" + std::to_string(i);
    QFormerBlock<T> b;
    b.ln_self = LayerNorm<T>::make(store, p + ".ln_self", "qformer", w, true);
    b.self_attn = Attention<T>::make(store, p + ".self", "qformer", w, w, w, cfg.heads, true);
    b.ln_cross = LayerNorm<T>::make(store, p + ".ln_cross", "qformer", w, true);
    b.ln_context = LayerNorm<T>::make(store, p + ".ln_context", "qformer", input_width, true);
    b.cross_attn = Attention<T>::make(store, p + ".cross", "qformer", w, input_width, w, cfg.heads, true);
    b.ln_ffn = LayerNorm<T>::make(store, p + ".ln_ffn", "qformer", w, true);
    b.ffn = FeedForward<T>::make(store, p + ".ffn", "qformer", w, 4 * w, true);
    q.blocks_.push_back(b);
  }
  q.ln_out_ = LayerNorm<T>::make(store, "qformer.ln_out", "qformer", w, true);
  return q;
}

template <typename T>
Tensor<T> QFormer<T>::bridge(const Tensor<T>& e) const {
  if (e.rank() != 2 || e.dim(0) != input_rows_)
    throw ContractError("qformer: expected " + std::to_string(input_rows_) + " edit states, got " +
                        shape_str(e.shape()));
  Tensor<T> x = queries_;
  for (const QFormerBlock<T>& b : blocks_) {
    const Tensor<T> n = b.ln_self(x);
    x = add(x, b.self_attn(n, n));
    x = add(x, b.cross_attn(b.ln_cross(x), b.ln_context(e)));
    x = add(x, b.ffn(b.ln_ffn(x)));
  }
  return ln_out_(x);
}

template class QFormer<float>;
template class QFormer<double>;

}  // namespace fireedit
