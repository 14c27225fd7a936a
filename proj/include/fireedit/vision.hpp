#pragma once

// Image-side encoders: holistic patch tokens, detector stand-in, ROI-align
// region tokens, the orthogonal latent codec and the dual-resolution hybrid
// stack consumed by the hybrid visual cross-attention.

#include <cstddef>
#include <optional>
#include <vector>

#include "fireedit/nn.hpp"
#include "fireedit/tensor.hpp"

namespace fireedit {

struct Image {
  static constexpr std::size_t channels = 3;

  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> values;  // row-major H x W x 3, in [0, 1]

  static Image filled(std::size_t height, std::size_t width, float r, float g, float b);
  float at(std::size_t y, std::size_t x, std::size_t c) const { return values[(y * width + x) * 3 + c]; }
  float& at(std::size_t y, std::size_t x, std::size_t c) { return values[(y * width + x) * 3 + c]; }
  bool operator==(const Image&) const = default;
};

template <typename T>
Tensor<T> image_tensor(const Image& image);
template <typename T>
Image tensor_image(const Tensor<T>& t);

struct Box {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  std::size_t area() const { return (x1 - x0) * (y1 - y0); }
  bool contains(std::size_t x, std::size_t y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  bool operator==(const Box&) const = default;
};

enum class RegionSource { oracle, grid };

struct RegionSet {
  std::vector<Box> boxes;
  RegionSource source = RegionSource::oracle;
};

// Throws ContractError unless 0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height.
void validate_box(const Box& box, std::size_t height, std::size_t width);
// Area descending, ties by x0 then y0.
std::vector<Box> canonical_order(std::vector<Box> boxes);

enum class DetectMode { oracle, grid };

// Oracle mode returns `oracle_boxes` verbatim; grid mode tiles the image k x k.
RegionSet detect(const Image& image, DetectMode mode, const RegionSet* oracle_boxes, std::size_t grid_k = 2);

template <typename T>
struct FeatureMap {
  std::size_t grid_h = 0, grid_w = 0;
  std::size_t patch = 1;
  Tensor<T> values;  // [(grid_h * grid_w) x width], row-major over the grid

  std::size_t width() const { return values.dim(1); }
  std::size_t image_h() const { return grid_h * patch; }
  std::size_t image_w() const { return grid_w * patch; }
};

// Linear patch projection plus learned 2-D positional embedding.
template <typename T>
struct PatchEncoder {
  std::size_t patch = 1, grid_h = 0, grid_w = 0;
  Tensor<T> projection;  // [(patch*patch*3) x width]
  Tensor<T> bias;        // [width]
  Tensor<T> position;    // [(grid_h*grid_w) x width]

  static PatchEncoder make(ParamStore<T>& store, const std::string& name, const std::string& group,
                           std::size_t image_h, std::size_t image_w, std::size_t patch, std::size_t width,
                           bool trainable);
  // image [H x W x 3] -> grid tokens.
  FeatureMap<T> encode(const Tensor<T>& image) const;
  // Projection without positional embedding; [(grid) x width].
  Tensor<T> content(const Tensor<T>& image) const;
};

// Bilinear sampling weights of ROI-align with one sample at each pooled-cell
// centre; `boxes` are in image pixels, rows are ordered box-major then cell
// row-major.
template <typename T>
RowMix<T> roi_align_weights(const FeatureMap<T>& features, const std::vector<Box>& boxes, std::size_t grid);

// Region tokens: canonical box order, ROI-align to grid x grid, flatten and
// project to the language-model width.
template <typename T>
struct RegionEncoder {
  std::size_t grid = 2;
  Linear<T> projection;

  static RegionEncoder make(ParamStore<T>& store, const std::string& name, const std::string& group,
                            std::size_t feature_width, std::size_t grid, std::size_t out_width, bool trainable);
  // [L_r x (grid*grid*feature_width)] before projection.
  Tensor<T> pool(const FeatureMap<T>& features, const RegionSet& regions) const;
  // [L_r x out_width]
  Tensor<T> encode(const FeatureMap<T>& features, const RegionSet& regions) const;
};

// Space-to-depth by `factor` followed by a fixed orthogonal channel mix. The
// codec has no parameters and records no gradient history.
class LatentCodec {
 public:
  explicit LatentCodec(std::size_t factor = 2);

  std::size_t factor() const { return factor_; }
  std::size_t channels() const { return channels_; }
  const std::vector<double>& mixing() const { return mixing_; }

  // [H x W x 3] -> [H/f x W/f x 3f^2]
  template <typename T>
  Tensor<T> encode(const Tensor<T>& image) const;
  template <typename T>
  Tensor<T> decode(const Tensor<T>& latent) const;

 private:
  std::size_t factor_;
  std::size_t channels_;
  std::vector<double> mixing_;  // channels x channels, orthogonal
};

// Coarse ("semantic", patch 2p) and fine ("detail", patch p) encoders, each
// tagged with its own encoder-id embedding; tokens are coarse first.
template <typename T>
struct HybridEncoder {
  PatchEncoder<T> coarse;
  PatchEncoder<T> fine;
  Tensor<T> coarse_id;
  Tensor<T> fine_id;

  static HybridEncoder make(ParamStore<T>& store, const std::string& name, const std::string& group,
                            std::size_t image_h, std::size_t image_w, std::size_t patch, std::size_t width,
                            bool trainable);
  std::size_t coarse_tokens() const { return coarse.grid_h * coarse.grid_w; }
  std::size_t fine_tokens() const { return fine.grid_h * fine.grid_w; }
  Tensor<T> encode(const Tensor<T>& image) const;
};

}  // namespace fireedit
