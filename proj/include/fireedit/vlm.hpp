#pragma once

// Region-aware causal language model with [IMG] vocabulary expansion and
// low-rank adapters on the attention query/value projections.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "fireedit/nn.hpp"
#include "fireedit/vision.hpp"

namespace fireedit {

enum class Segment : std::uint8_t { text, image, region, img_slot };

// Per-position ids and tags. Image and region positions carry id 0, which is
// never read.
struct TokenSequence {
  std::vector<std::size_t> ids;
  std::vector<Segment> segments;

  std::size_t size() const { return ids.size(); }
  static TokenSequence text(std::vector<std::size_t> ids);
};

struct VlmConfig {
  std::size_t width = 64;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t vocab_size = 64;
  std::size_t img_tokens = 4;  // r
  std::size_t lora_rank = 4;
  double lora_alpha = 8.0;
  std::size_t feature_width = 64;
  std::size_t image_patch = 2;
  std::size_t region_grid = 2;
  bool region_positional = true;

  void validate() const;
};

// y = x W0 + (alpha / rank) * (x A) B with W0 frozen and B zero at init.
template <typename T>
struct LoraLinear {
  Linear<T> base;
  Tensor<T> down;  // A [in x rank]
  Tensor<T> up;    // B [rank x out]
  T factor = 1;

  static LoraLinear make(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                         std::size_t rank, double alpha);
  Tensor<T> operator()(const Tensor<T>& x, bool adapted = true) const;
};

template <typename T>
struct VlmBlock {
  LayerNorm<T> ln1, ln2;
  LoraLinear<T> q, v;
  Linear<T> k, o;
  FeedForward<T> ffn;
};

template <typename T>
struct Assembled {
  Tensor<T> h;  // [len x D], positional encoding included
  TokenSequence seq;
};

template <typename T>
struct VlmOutput {
  Tensor<T> logits;  // [len x (vocab + r)]
  Tensor<T> hidden;  // [len x D]
};

template <typename T>
class Vlm {
 public:
  static Vlm make(ParamStore<T>& store, const VlmConfig& cfg, std::size_t image_h, std::size_t image_w);

  const VlmConfig& config() const { return cfg_; }

  // Holistic patch features mu_nu(x) from the frozen encoder.
  FeatureMap<T> image_features(const Tensor<T>& image) const { return vision_.encode(image); }
  // Region tokens [L_r x D] (empty RegionSet gives zero rows).
  Tensor<T> region_tokens(const FeatureMap<T>& features, const RegionSet& regions) const {
    return regions_.encode(features, regions);
  }

  // [text, W(image), regions, E] plus positional encoding.
  Assembled<T> assemble_input(const TokenSequence& text, const FeatureMap<T>& image, const Tensor<T>& regions,
                              std::size_t r) const;
  VlmOutput<T> forward_causal(const Tensor<T>& h) const;

  // Assemble and run on one record; `use_regions` false drops P entirely.
  VlmOutput<T> run(const Tensor<T>& image, const TokenSequence& text, const RegionSet& regions,
                   bool use_regions) const;

  // r greedy next-token steps after the prefix [text, image, regions].
  std::vector<std::size_t> greedy_slots(const Tensor<T>& image, const TokenSequence& text, const RegionSet& regions,
                                        bool use_regions) const;

  // Disables every LoRA branch (frozen base model).
  void set_adapted(bool on) { adapted_ = on; }

  const Tensor<T>& expansion() const { return expansion_; }
  const Tensor<T>& token_embedding() const { return tok_emb_; }
  const PatchEncoder<T>& vision() const { return vision_; }

 private:
  Tensor<T> prefix_rows(const TokenSequence& text, const FeatureMap<T>& image, const Tensor<T>& regions,
                        TokenSequence& seq) const;
  Tensor<T> with_positions(const Tensor<T>& rows, const TokenSequence& seq) const;

  VlmConfig cfg_;
  PatchEncoder<T> vision_;
  RegionEncoder<T> regions_;
  Linear<T> adapter1_, adapter2_;
  Tensor<T> tok_emb_;    // frozen [vocab x D]
  Tensor<T> expansion_;  // E [r x D]
  std::vector<VlmBlock<T>> blocks_;
  LayerNorm<T> ln_f_;
  bool adapted_ = true;
};

// Sum over the r slots of -log p([IMG_i] | prefix); the logits row before
// slot i predicts it.
template <typename T>
Tensor<T> loss_vlm(const Tensor<T>& logits, std::size_t r, std::size_t vocab_size);

// Hidden rows at the final r positions, [IMG_1] first.
template <typename T>
Tensor<T> extract_edit_states(const Tensor<T>& hidden, std::size_t r);

}  // namespace fireedit
