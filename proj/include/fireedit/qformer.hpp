#pragma once

// Learnable-query bridge from the r [IMG] hidden states to the diffusion
// conditioning width.

#include <cstddef>
#include <vector>

#include "fireedit/nn.hpp"

namespace fireedit {

struct QFormerConfig {
  std::size_t queries = 8;  // n_q
  std::size_t depth = 2;
  std::size_t width = 64;  // D_c
  std::size_t heads = 4;

  void validate() const;
};

template <typename T>
struct QFormerBlock {
  LayerNorm<T> ln_self, ln_cross, ln_context, ln_ffn;
  Attention<T> self_attn, cross_attn;
  FeedForward<T> ffn;
};

template <typename T>
class QFormer {
 public:
  // `input_rows` is r and `input_width` the language-model width D.
  static QFormer make(ParamStore<T>& store, const QFormerConfig& cfg, std::size_t input_rows,
                      std::size_t input_width);

  // e [r x D] -> e_t [n_q x D_c]
  Tensor<T> bridge(const Tensor<T>& e) const;

  const QFormerConfig& config() const { return cfg_; }
  const std::vector<QFormerBlock<T>>& blocks() const { return blocks_; }

 private:
  QFormerConfig cfg_;
  std::size_t input_rows_ = 0;
  Tensor<T> queries_;
  std::vector<QFormerBlock<T>> blocks_;
  LayerNorm<T> ln_out_;
};

}  // namespace fireedit
