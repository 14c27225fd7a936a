#include "fireedit/nn.hpp"

#include <numeric>

#include <cmath>

namespace fireedit {

template <typename T>
Tensor<T> ParamStore<T>::add(const std::string& name, const std::string& group, Shape shape, Init init,
                             bool trainable, double stddev) {
  if (index_.count(name) != 0) throw ContractError("parameter registered twice: " + name);
  const std::size_t n = shape_numel(shape);
  std::vector<T> values(n, T(0));
  if (init == Init::ones) std::fill(values.begin(), values.end(), T(1));
  if (init == Init::normal)
    for (T& v : values) v = static_cast<T>(rng_.normal() * stddev);
  Tensor<T> t(std::move(shape), std::move(values));
  t.set_requires_grad(trainable);
  index_[name] = params_.size();
  params_.push_back(NamedParam<T>{name, group, t, trainable});
  return t;
}

template <typename T>
const NamedParam<T>* ParamStore<T>::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

template <typename T>
std::vector<Tensor<T>> ParamStore<T>::trainable() const {
  std::vector<Tensor<T>> out;
  for (const auto& p : params_)
    if (p.trainable) out.push_back(p.value);
  return out;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

template <typename T>
std::size_t ParamStore<T>::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
Linear<T> Linear<T>::make(ParamStore<T>& store, const std::string& name, const std::string& group,
                          std::size_t in, std::size_t out, bool trainable, bool with_bias, bool zero_init) {
  Linear l;
  l.weight = store.add(name + ".weight", group, {in, out}, zero_init ? Init::zeros : Init::normal, trainable,
                       1.0 / std::sqrt(static_cast<double>(in)));
  if (with_bias) l.bias = store.add(name + ".bias", group, {out}, Init::zeros, trainable);
  return l;
}

template <typename T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x) const {
  Tensor<T> y = matmul(x, weight);
  return bias.defined() ? add_rowvec(y, bias) : y;
}

template <typename T>
LayerNorm<T> LayerNorm<T>::make(ParamStore<T>& store, const std::string& name, const std::string& group,
                                std::size_t width, bool trainable) {
  LayerNorm n;
  n.gain = store.add(name + ".gain", group, {width}, Init::ones, trainable);
  n.bias = store.add(name + ".bias", group, {width}, Init::zeros, trainable);
  return n;
}

template <typename T>
GroupNorm<T> GroupNorm<T>::make(ParamStore<T>& store, const std::string& name, const std::string& group,
                                std::size_t channels, bool trainable) {
  GroupNorm n;
  n.gain = store.add(name + ".gain", group, {channels}, Init::ones, trainable);
  n.bias = store.add(name + ".bias", group, {channels}, Init::zeros, trainable);
  n.groups = std::gcd(channels, std::size_t{8});
  return n;
}

template <typename T>
FeedForward<T> FeedForward<T>::make(ParamStore<T>& store, const std::string& name, const std::string& group,
                                    std::size_t width, std::size_t hidden, bool trainable) {
  return FeedForward{Linear<T>::make(store, name + ".up", group, width, hidden, trainable),
                     Linear<T>::make(store, name + ".down", group, hidden, width, trainable)};
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads, bool causal) {
  const std::size_t width = q.dim(1);
  if (heads == 0 || width % heads != 0 || k.dim(1) != width)
    throw DimensionError("attention: width " + std::to_string(width) + " incompatible with " +
                         std::to_string(heads) + " heads and key width " + std::to_string(k.dim(1)));
  const std::size_t dh = width / heads;
  const T inv = T(1) / std::sqrt(static_cast<T>(dh));
  if (heads == 1) return matmul(softmax_rows(scale(matmul_bt(q, k), inv), causal), v);
  const std::size_t dv = v.dim(1) / heads;
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor<T> qh = slice(q, 1, h * dh, (h + 1) * dh);
    const Tensor<T> kh = slice(k, 1, h * dh, (h + 1) * dh);
    const Tensor<T> vh = slice(v, 1, h * dv, (h + 1) * dv);
    outs.push_back(matmul(softmax_rows(scale(matmul_bt(qh, kh), inv), causal), vh));
  }
  return concat(outs, 1);
}

template <typename T>
Attention<T> Attention<T>::make(ParamStore<T>& store, const std::string& name, const std::string& group,
                                std::size_t query_width, std::size_t kv_width, std::size_t width,
                                std::size_t heads, bool trainable) {
  Attention a;
  a.q = Linear<T>::make(store, name + ".q", group, query_width, width, trainable, false);
  a.k = Linear<T>::make(store, name + ".k", group, kv_width, width, trainable, false);
  a.v = Linear<T>::make(store, name + ".v", group, kv_width, width, trainable, false);
  a.o = Linear<T>::make(store, name + ".o", group, width, query_width, trainable);
  a.heads = heads;
  return a;
}

template <typename T>
Tensor<T> sinusoidal_embedding(double position, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<T> v(dim, T(0));
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    v[i] = static_cast<T>(std::sin(position * freq));
    v[half + i] = static_cast<T>(std::cos(position * freq));
  }
  return Tensor<T>({dim}, std::move(v));
}

template <typename T>
Tensor<T> sinusoidal_table(std::size_t length, std::size_t dim) {
  std::vector<T> v;
  v.reserve(length * dim);
  for (std::size_t p = 0; p < length; ++p) {
    const auto row = sinusoidal_embedding<T>(static_cast<double>(p), dim);
    v.insert(v.end(), row.data().begin(), row.data().end());
  }
  return Tensor<T>({length, dim}, std::move(v));
}

template class ParamStore<float>;
template class ParamStore<double>;
template struct Linear<float>;
template struct Linear<double>;
template struct LayerNorm<float>;
template struct LayerNorm<double>;
template struct GroupNorm<float>;
template struct GroupNorm<double>;
template struct FeedForward<float>;
template struct FeedForward<double>;
template struct Attention<float>;
template struct Attention<double>;
template Tensor<float> multi_head_attention(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                            std::size_t, bool);
template Tensor<double> multi_head_attention(const Tensor<double>&, const Tensor<double>&,
                                             const Tensor<double>&, std::size_t, bool);
template Tensor<float> sinusoidal_embedding<float>(double, std::size_t);
template Tensor<double> sinusoidal_embedding<double>(double, std::size_t);
template Tensor<float> sinusoidal_table<float>(std::size_t, std::size_t);
template Tensor<double> sinusoidal_table<double>(std::size_t, std::size_t);

}  // namespace fireedit
