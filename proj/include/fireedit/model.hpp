#pragma once

// The full editing model: region-aware VLM, Q-Former bridge, TATI, HVCA and
// the latent denoiser, with the joint training loss and the guided sampler.

#include <cstddef>
#include <cstdint>
#include <vector>

#include "fireedit/conditioning.hpp"
#include "fireedit/diffusion.hpp"
#include "fireedit/qformer.hpp"
#include "fireedit/record.hpp"
#include "fireedit/vision.hpp"
#include "fireedit/vlm.hpp"

namespace fireedit {

struct ModelConfig {
  std::size_t image_size = 16;
  std::size_t latent_factor = 2;
  std::size_t patch = 2;
  std::size_t vlm_patch = 4;
  std::size_t feature_width = 64;
  std::size_t vlm_width = 64;
  std::size_t vlm_layers = 4;
  std::size_t vlm_heads = 4;
  std::size_t vocab_size = 64;
  std::size_t img_tokens = 4;
  std::size_t lora_rank = 4;
  double lora_alpha = 8.0;
  std::size_t region_grid = 2;
  bool region_positional = true;
  std::size_t qformer_queries = 8;
  std::size_t qformer_depth = 2;
  std::size_t cond_width = 64;
  std::size_t cond_heads = 4;
  std::size_t tati_units = 2;
  std::size_t tati_queries = 8;
  std::size_t hvca_blocks = 2;
  std::size_t hvca_queries = 16;
  std::size_t hybrid_width = 64;
  std::size_t unet_channels = 32;
  std::size_t unet_levels = 2;
  std::size_t unet_attention = 3;
  std::size_t steps = 64;
  double lambda = 1.0;
  bool use_region = true;
  bool use_tati = true;
  bool use_hvca = true;

  VlmConfig vlm() const;
  QFormerConfig qformer() const;
  TatiConfig tati() const;
  HvcaConfig hvca() const;
  DenoiserConfig denoiser() const;
  std::size_t latent_size() const { return image_size / latent_factor; }
  void validate() const;
};

template <typename T>
struct TrainDraw {
  DropDecision drop;
  std::size_t t = 1;
  Tensor<T> eps;
};

template <typename T>
struct LossParts {
  Tensor<T> vlm;  // zero when the text condition was dropped
  Tensor<T> diff;
  Tensor<T> total;
  bool vlm_active = false;
};

template <typename T>
struct TextCondition {
  Tensor<T> logits;
  Tensor<T> e;    // [r x D]
  Tensor<T> e_t;  // [n_q x D_c]
};

struct SampleOptions {
  GuidanceScales scales;
  std::size_t steps = 64;
  std::uint64_t seed = 0;
};

template <typename T>
class EditModel {
 public:
  EditModel(const ModelConfig& cfg, std::uint64_t seed);
  EditModel(const EditModel&) = delete;
  EditModel& operator=(const EditModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }
  const LatentCodec& codec() const { return codec_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  Vlm<T>& vlm() { return vlm_; }
  const Vlm<T>& vlm() const { return vlm_; }
  const QFormer<T>& qformer() const { return qformer_; }
  const Tati<T>& tati() const { return tati_; }
  const Hvca<T>& hvca() const { return hvca_; }
  const HybridEncoder<T>& hybrid() const { return hybrid_; }
  const Denoiser<T>& denoiser() const { return denoiser_; }
  const Tensor<T>& null_text() const { return null_text_; }
  const Tensor<T>& null_visual() const { return null_visual_; }

  // Dropout pair, then t uniform in [1, T], then Gaussian noise.
  TrainDraw<T> draw(Rng& rng, double p_img, double p_txt) const;

  TextCondition<T> encode_text(const Tensor<T>& source, const TokenSequence& instruction,
                               const RegionSet& boxes) const;
  // HVCA output, or undefined when the visual branch is disabled.
  Tensor<T> visual(const Tensor<T>& source, const Tensor<T>& text) const;
  // TATI output, or e_t itself when TATI is disabled.
  Tensor<T> condition(const Tensor<T>& e_t, std::size_t t) const;

  LossParts<T> losses(const DatasetRecord& record, const TrainDraw<T>& draw) const;

  Image sample(const Image& source, const TokenSequence& instruction, const RegionSet& boxes,
               const SampleOptions& options) const;

  std::vector<std::size_t> greedy_slots(const DatasetRecord& record) const;

 private:
  ModelConfig cfg_;
  ParamStore<T> store_;
  LatentCodec codec_;
  NoiseSchedule schedule_;
  Vlm<T> vlm_;
  QFormer<T> qformer_;
  Tati<T> tati_;
  HybridEncoder<T> hybrid_;
  Hvca<T> hvca_;
  Denoiser<T> denoiser_;
  Tensor<T> null_text_;    // [n_q x D_c]
  Tensor<T> null_visual_;  // [n_hq x D_c]
};

}  // namespace fireedit
