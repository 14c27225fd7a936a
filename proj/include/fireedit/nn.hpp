#pragma once

// Parameter registry and the small layers every model module is built from.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "fireedit/rng.hpp"
#include "fireedit/tensor.hpp"

namespace fireedit {

enum class Init { zeros, ones, normal };

template <typename T>
struct NamedParam {
  std::string name;
  std::string group;
  Tensor<T> value;
  bool trainable = false;
};

// Owns every parameter of a model in registration order. Modules keep tensor
// handles that alias the entries here, so optimizer updates are visible to
// them.
template <typename T>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed) : rng_(seed) {}

  // `stddev` applies to Init::normal.
  Tensor<T> add(const std::string& name, const std::string& group, Shape shape, Init init,
                bool trainable, double stddev = 0.0);

  const std::vector<NamedParam<T>>& params() const { return params_; }
  std::vector<NamedParam<T>>& params() { return params_; }
  const NamedParam<T>* find(const std::string& name) const;
  std::vector<Tensor<T>> trainable() const;
  void zero_grad();
  std::size_t count() const;

 private:
  Rng rng_;
  std::vector<NamedParam<T>> params_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in x out]
  Tensor<T> bias;    // [out] or undefined

  static Linear make(ParamStore<T>& store, const std::string& name, const std::string& group,
                     std::size_t in, std::size_t out, bool trainable, bool with_bias = true,
                     bool zero_init = false);
  // x[n x in] -> [n x out]
  Tensor<T> operator()(const Tensor<T>& x) const;
};

template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  static LayerNorm make(ParamStore<T>& store, const std::string& name, const std::string& group,
                        std::size_t width, bool trainable);
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }
};

// Group normalization over feature maps [H x W x C]; up to 8 groups.
template <typename T>
struct GroupNorm {
  Tensor<T> gain;
  Tensor<T> bias;
  std::size_t groups = 1;

  static GroupNorm make(ParamStore<T>& store, const std::string& name, const std::string& group,
                        std::size_t channels, bool trainable);
  Tensor<T> operator()(const Tensor<T>& x) const { return group_norm(x, gain, bias, groups); }
};

// Two-layer GELU perceptron.
template <typename T>
struct FeedForward {
  Linear<T> up;
  Linear<T> down;

  static FeedForward make(ParamStore<T>& store, const std::string& name, const std::string& group,
                          std::size_t width, std::size_t hidden, bool trainable);
  Tensor<T> operator()(const Tensor<T>& x) const { return down(gelu(up(x))); }
};

// softmax(q k^T / sqrt(d_head)) v per head; columns are split evenly across
// heads and the head outputs concatenated.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads, bool causal = false);

// Projection set of one attention sublayer.
template <typename T>
struct Attention {
  Linear<T> q, k, v, o;
  std::size_t heads = 1;

  static Attention make(ParamStore<T>& store, const std::string& name, const std::string& group,
                        std::size_t query_width, std::size_t kv_width, std::size_t width,
                        std::size_t heads, bool trainable);
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& context, bool causal = false) const {
    return o(multi_head_attention(q(x), k(context), v(context), heads, causal));
  }
};

// [sin(t f_i), cos(t f_i)] with geometric frequencies, width `dim` (even).
template <typename T>
Tensor<T> sinusoidal_embedding(double position, std::size_t dim);

// Sinusoidal encodings for positions 0..length-1, [length x dim].
template <typename T>
Tensor<T> sinusoidal_table(std::size_t length, std::size_t dim);

}  // namespace fireedit
