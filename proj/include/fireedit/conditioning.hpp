#pragma once

// Time-aware target injection (TATI), hybrid visual cross-attention (HVCA)
// and the decoupled text/visual cross-attention used inside the denoiser.

#include <cstddef>
#include <vector>

#include "fireedit/nn.hpp"

namespace fireedit {

// Sinusoidal code of t followed by a two-layer projection; t in [0, steps].
template <typename T>
struct TimestepEmbedding {
  std::size_t steps = 0;
  std::size_t width = 0;
  Linear<T> l1, l2;

  static TimestepEmbedding make(ParamStore<T>& store, const std::string& name, const std::string& group,
                                std::size_t steps, std::size_t width, std::size_t out_width, bool trainable);
  // [1 x out_width]
  Tensor<T> operator()(std::size_t t) const;
};

struct TatiConfig {
  std::size_t units = 2;     // N
  std::size_t queries = 8;   // n_tq
  std::size_t width = 64;    // D_c
  std::size_t heads = 4;
  std::size_t steps = 64;    // schedule length T

  void validate() const;
};

template <typename T>
struct TatiUnit {
  Linear<T> mod1, mod2;  // mod2 emits [gamma1, beta1, gamma2, beta2], zero-initialized
  LayerNorm<T> ln_context;
  Attention<T> cross_attn;
  FeedForward<T> ffn;
};

// LN(x) * (1 + gamma) + beta without a learned affine; gamma/beta are [1 x d].
template <typename T>
Tensor<T> adaptive_layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta);

template <typename T>
class Tati {
 public:
  static Tati make(ParamStore<T>& store, const TatiConfig& cfg);

  // e_t [n_q x D_c], t in [0, T] -> [n_tq x D_c]
  Tensor<T> operator()(const Tensor<T>& e_t, std::size_t t) const;

  const TatiConfig& config() const { return cfg_; }
  const std::vector<TatiUnit<T>>& units() const { return units_; }

 private:
  TatiConfig cfg_;
  TimestepEmbedding<T> temb_;
  Tensor<T> queries_;
  std::vector<TatiUnit<T>> units_;
  LayerNorm<T> ln_out_;
};

struct HvcaConfig {
  std::size_t blocks = 2;    // L
  std::size_t queries = 16;  // n_hq
  std::size_t width = 64;    // D_c
  std::size_t heads = 4;
  std::size_t visual_width = 64;

  void validate() const;
};

template <typename T>
struct HvcaBlock {
  LayerNorm<T> ln_visual_q, ln_visual, ln_text_q, ln_text, ln_ffn;
  Attention<T> visual_attn, text_attn;
  FeedForward<T> ffn;
};

template <typename T>
class Hvca {
 public:
  static Hvca make(ParamStore<T>& store, const HvcaConfig& cfg);

  // hybrid [L_h x D_h], text [n x D_c] -> v [n_hq x D_c]
  Tensor<T> operator()(const Tensor<T>& hybrid, const Tensor<T>& text) const;

  const HvcaConfig& config() const { return cfg_; }

 private:
  HvcaConfig cfg_;
  Tensor<T> queries_;
  std::vector<HvcaBlock<T>> blocks_;
  LayerNorm<T> ln_out_;
};

template <typename T>
struct DecoupledAttention {
  Linear<T> q, k_text, v_text, k_visual, v_visual;

  static DecoupledAttention make(ParamStore<T>& store, const std::string& name, const std::string& group,
                                 std::size_t query_width, std::size_t cond_width, bool trainable);
};

// softmax(Q K1^T / sqrt d) V1 + lambda * softmax(Q K2^T / sqrt d) V2 with
// Q = z Wq, K1/V1 from `cond`, K2/V2 from `visual`. An undefined `visual` or
// lambda = 0 returns the text branch alone.
template <typename T>
Tensor<T> decoupled_cross_attention(const DecoupledAttention<T>& p, const Tensor<T>& z, const Tensor<T>& cond,
                                    const Tensor<T>& visual, T lambda);

// The two branches separately, for the linearity checks.
template <typename T>
struct DecoupledBranches {
  Tensor<T> text;
  Tensor<T> visual;
};
template <typename T>
DecoupledBranches<T> decoupled_branches(const DecoupledAttention<T>& p, const Tensor<T>& z, const Tensor<T>& cond,
                                        const Tensor<T>& visual);

}  // namespace fireedit
