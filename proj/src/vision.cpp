#include "fireedit/vision.hpp"

#include <algorithm>
#include <cmath>

namespace fireedit {

Image Image::filled(std::size_t height, std::size_t width, float r, float g, float b) {
  Image im{height, width, std::vector<float>(height * width * 3)};
  for (std::size_t i = 0; i < height * width; ++i) {
    im.values[i * 3] = r;
    im.values[i * 3 + 1] = g;
    im.values[i * 3 + 2] = b;
  }
  return im;
}

template <typename T>
Tensor<T> image_tensor(const Image& image) {
  return Tensor<T>({image.height, image.width, 3}, std::vector<T>(image.values.begin(), image.values.end()));
}

template <typename T>
Image tensor_image(const Tensor<T>& t) {
  if (t.rank() != 3 || t.dim(2) != 3) throw DimensionError("tensor_image: expected [H x W x 3], got " + shape_str(t.shape()));
  return Image{t.dim(0), t.dim(1), std::vector<float>(t.data().begin(), t.data().end())};
}

void validate_box(const Box& box, std::size_t height, std::size_t width) {
  if (!(box.x0 < box.x1 && box.x1 <= width && box.y0 < box.y1 && box.y1 <= height))
    throw ContractError("box (" + std::to_string(box.x0) + "," + std::to_string(box.y0) + "," +
                        std::to_string(box.x1) + "," + std::to_string(box.y1) + ") outside " +
                        std::to_string(width) + "x" + std::to_string(height) + " image");
}

std::vector<Box> canonical_order(std::vector<Box> boxes) {
  std::stable_sort(boxes.begin(), boxes.end(), [](const Box& a, const Box& b) {
    if (a.area() != b.area()) return a.area() > b.area();
    if (a.x0 != b.x0) return a.x0 < b.x0;
    return a.y0 < b.y0;
  });
  return boxes;
}

RegionSet detect(const Image& image, DetectMode mode, const RegionSet* oracle_boxes, std::size_t grid_k) {
  if (mode == DetectMode::oracle) {
    if (oracle_boxes == nullptr) throw ContractError("detect: oracle mode requires oracle boxes");
    for (const Box& b : oracle_boxes->boxes) validate_box(b, image.height, image.width);
    return RegionSet{oracle_boxes->boxes, RegionSource::oracle};
  }
  if (grid_k == 0 || grid_k > image.height || grid_k > image.width)
    throw ContractError("detect: grid size " + std::to_string(grid_k) + " does not tile the image");
  RegionSet out{{}, RegionSource::grid};
  for (std::size_t gy = 0; gy < grid_k; ++gy)
    for (std::size_t gx = 0; gx < grid_k; ++gx)
      out.boxes.push_back(Box{gx * image.width / grid_k, gy * image.height / grid_k, (gx + 1) * image.width / grid_k,
                              (gy + 1) * image.height / grid_k});
  return out;
}

// ---- patch encoder ---------------------------------------------------------

template <typename T>
PatchEncoder<T> PatchEncoder<T>::make(ParamStore<T>& store, const std::string& name, const std::string& group,
                                      std::size_t image_h, std::size_t image_w, std::size_t patch,
                                      std::size_t width, bool trainable) {
  if (patch == 0 || image_h % patch != 0 || image_w % patch != 0)
    throw DimensionError("patch encoder: " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                         " image is not divisible by patch " + std::to_string(patch));
  PatchEncoder e;
  e.patch = patch;
  e.grid_h = image_h / patch;
  e.grid_w = image_w / patch;
  const std::size_t in = patch * patch * 3;
  e.projection = store.add(name + ".projection", group, {in, width}, Init::normal, trainable,
                           1.0 / std::sqrt(static_cast<double>(in)));
  e.bias = store.add(name + ".bias", group, {width}, Init::zeros, trainable);
  e.position = store.add(name + ".position", group, {e.grid_h * e.grid_w, width}, Init::normal, trainable, 0.5);
  return e;
}

template <typename T>
Tensor<T> PatchEncoder<T>::content(const Tensor<T>& image) const {
  if (image.rank() != 3 || image.dim(2) != 3 || image.dim(0) != grid_h * patch || image.dim(1) != grid_w * patch)
    throw DimensionError("patch encoder expects a " + std::to_string(grid_h * patch) + "x" +
                         std::to_string(grid_w * patch) + "x3 image, got " + shape_str(image.shape()));
  const Tensor<T> tokens = conv2d(image, projection, patch, patch, 0);
  return add_rowvec(reshape(tokens, {grid_h * grid_w, projection.dim(1)}), bias);
}

template <typename T>
FeatureMap<T> PatchEncoder<T>::encode(const Tensor<T>& image) const {
  return FeatureMap<T>{grid_h, grid_w, patch, add(content(image), position)};
}

// ---- regions ---------------------------------------------------------------

template <typename T>
RowMix<T> roi_align_weights(const FeatureMap<T>& features, const std::vector<Box>& boxes, std::size_t grid) {
  RowMix<T> mix;
  const double p = static_cast<double>(features.patch);
  const double max_y = static_cast<double>(features.grid_h - 1), max_x = static_cast<double>(features.grid_w - 1);
  for (const Box& b : boxes) {
    validate_box(b, features.image_h(), features.image_w());
    const double cell_h = static_cast<double>(b.y1 - b.y0) / static_cast<double>(grid);
    const double cell_w = static_cast<double>(b.x1 - b.x0) / static_cast<double>(grid);
    for (std::size_t i = 0; i < grid; ++i)
      for (std::size_t j = 0; j < grid; ++j) {
        // Sample point in feature-grid coordinates (cell centres at integers).
        const double fy = std::clamp((static_cast<double>(b.y0) + (static_cast<double>(i) + 0.5) * cell_h) / p - 0.5, 0.0, max_y);
        const double fx = std::clamp((static_cast<double>(b.x0) + (static_cast<double>(j) + 0.5) * cell_w) / p - 0.5, 0.0, max_x);
        const auto y0 = static_cast<std::size_t>(std::floor(fy));
        const auto x0 = static_cast<std::size_t>(std::floor(fx));
        const std::size_t y1 = std::min(y0 + 1, features.grid_h - 1), x1 = std::min(x0 + 1, features.grid_w - 1);
        const double wy = fy - static_cast<double>(y0), wx = fx - static_cast<double>(x0);
        const std::size_t gw = features.grid_w;
        mix.add(y0 * gw + x0, static_cast<T>((1 - wy) * (1 - wx)));
        mix.add(y0 * gw + x1, static_cast<T>((1 - wy) * wx));
        mix.add(y1 * gw + x0, static_cast<T>(wy * (1 - wx)));
        mix.add(y1 * gw + x1, static_cast<T>(wy * wx));
        mix.end_row();
      }
  }
  return mix;
}

template <typename T>
RegionEncoder<T> RegionEncoder<T>::make(ParamStore<T>& store, const std::string& name, const std::string& group,
                                        std::size_t feature_width, std::size_t grid, std::size_t out_width,
                                        bool trainable) {
  RegionEncoder r;
  r.grid = grid;
  r.projection = Linear<T>::make(store, name + ".projection", group, grid * grid * feature_width, out_width, trainable);
  return r;
}

template <typename T>
Tensor<T> RegionEncoder<T>::pool(const FeatureMap<T>& features, const RegionSet& regions) const {
  const std::vector<Box> boxes = canonical_order(regions.boxes);
  const Tensor<T> cells = mix_rows(features.values, roi_align_weights(features, boxes, grid));
  return reshape(cells, {boxes.size(), grid * grid * features.width()});
}

template <typename T>
Tensor<T> RegionEncoder<T>::encode(const FeatureMap<T>& features, const RegionSet& regions) const {
  return projection(pool(features, regions));
}

// ---- latent codec ----------------------------------------------------------

LatentCodec::LatentCodec(std::size_t factor) : factor_(factor), channels_(factor * factor * 3) {
  if (factor == 0) throw ContractError("latent codec: factor must be positive");
  // Fixed orthogonal mix: Gram-Schmidt on a seeded Gaussian matrix.
  Rng rng(0x0C0DEC);
  const std::size_t c = channels_;
  std::vector<double> q(c * c);
  for (double& v : q) v = rng.normal();
  for (std::size_t i = 0; i < c; ++i) {
    double* row = q.data() + i * c;
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t j = 0; j < i; ++j) {
        const double* prev = q.data() + j * c;
        double d = 0;
        for (std::size_t k = 0; k < c; ++k) d += row[k] * prev[k];
        for (std::size_t k = 0; k < c; ++k) row[k] -= d * prev[k];
      }
    double n = 0;
    for (std::size_t k = 0; k < c; ++k) n += row[k] * row[k];
    n = std::sqrt(n);
    for (std::size_t k = 0; k < c; ++k) row[k] /= n;
  }
  mixing_ = std::move(q);
}

template <typename T>
Tensor<T> LatentCodec::encode(const Tensor<T>& image) const {
  if (image.rank() != 3 || image.dim(2) != 3 || image.dim(0) % factor_ != 0 || image.dim(1) % factor_ != 0)
    throw DimensionError("latent encode: " + shape_str(image.shape()) + " is not divisible by factor " +
                         std::to_string(factor_));
  const std::size_t h = image.dim(0) / factor_, w = image.dim(1) / factor_, c = channels_, f = factor_;
  std::vector<T> out(h * w * c);
  std::vector<double> depth(c);
  const auto src = image.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t dy = 0; dy < f; ++dy)
        for (std::size_t dx = 0; dx < f; ++dx)
          for (std::size_t ch = 0; ch < 3; ++ch)
            depth[(dy * f + dx) * 3 + ch] = src[((y * f + dy) * image.dim(1) + x * f + dx) * 3 + ch];
      T* dst = out.data() + (y * w + x) * c;
      for (std::size_t o = 0; o < c; ++o) {
        double s = 0;
        for (std::size_t k = 0; k < c; ++k) s += depth[k] * mixing_[o * c + k];
        dst[o] = static_cast<T>(s);
      }
    }
  return Tensor<T>({h, w, c}, std::move(out));
}

template <typename T>
Tensor<T> LatentCodec::decode(const Tensor<T>& latent) const {
  if (latent.rank() != 3 || latent.dim(2) != channels_)
    throw DimensionError("latent decode: expected " + std::to_string(channels_) + " channels, got " +
                         shape_str(latent.shape()));
  const std::size_t h = latent.dim(0), w = latent.dim(1), c = channels_, f = factor_;
  const std::size_t width = w * f;
  std::vector<T> out(h * f * width * 3);
  std::vector<double> depth(c);
  const auto src = latent.data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const T* z = src.data() + (y * w + x) * c;
      std::fill(depth.begin(), depth.end(), 0.0);
      for (std::size_t o = 0; o < c; ++o)
        for (std::size_t k = 0; k < c; ++k) depth[k] += static_cast<double>(z[o]) * mixing_[o * c + k];
      for (std::size_t dy = 0; dy < f; ++dy)
        for (std::size_t dx = 0; dx < f; ++dx)
          for (std::size_t ch = 0; ch < 3; ++ch)
            out[((y * f + dy) * width + x * f + dx) * 3 + ch] = static_cast<T>(depth[(dy * f + dx) * 3 + ch]);
    }
  return Tensor<T>({h * f, width, 3}, std::move(out));
}

// ---- hybrid encoder --------------------------------------------------------

template <typename T>
HybridEncoder<T> HybridEncoder<T>::make(ParamStore<T>& store, const std::string& name, const std::string& group,
                                        std::size_t image_h, std::size_t image_w, std::size_t patch,
                                        std::size_t width, bool trainable) {
  HybridEncoder h;
  h.coarse = PatchEncoder<T>::make(store, name + ".coarse", group, image_h, image_w, 2 * patch, width, trainable);
  h.fine = PatchEncoder<T>::make(store, name + ".fine", group, image_h, image_w, patch, width, trainable);
  h.coarse_id = store.add(name + ".coarse_id", group, {width}, Init::normal, trainable, 0.5);
  h.fine_id = store.add(name + ".fine_id", group, {width}, Init::normal, trainable, 0.5);
  return h;
}

template <typename T>
Tensor<T> HybridEncoder<T>::encode(const Tensor<T>& image) const {
  const Tensor<T> c = add_rowvec(coarse.encode(image).values, coarse_id);
  const Tensor<T> f = add_rowvec(fine.encode(image).values, fine_id);
  return concat<T>({c, f}, 0);
}

#define FIREEDIT_INSTANTIATE(T)                                                                    \
  template Tensor<T> image_tensor<T>(const Image&);                                                \
  template Image tensor_image<T>(const Tensor<T>&);                                                \
  template struct PatchEncoder<T>;                                                                 \
  template RowMix<T> roi_align_weights<T>(const FeatureMap<T>&, const std::vector<Box>&, std::size_t); \
  template struct RegionEncoder<T>;                                                                \
  template Tensor<T> LatentCodec::encode<T>(const Tensor<T>&) const;                               \
  template Tensor<T> LatentCodec::decode<T>(const Tensor<T>&) const;                               \
  template struct HybridEncoder<T>;

FIREEDIT_INSTANTIATE(float)
FIREEDIT_INSTANTIATE(double)

#undef FIREEDIT_INSTANTIATE

}  // namespace fireedit
