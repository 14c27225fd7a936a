#pragma once

// Dense row-major tensor with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto a shared node holding shape, values and an
// optional gradient buffer. Values never change after construction except for
// leaf parameters updated by an optimizer through mutable_data(). Operations
// executed while a GradTape is active (see TapeScope) and touching at least one
// requires_grad input are recorded on that tape; GradTape::backward replays
// them in reverse recording order.
//
// Everything is instantiated for float (training, inference) and double
// (gradient checks).

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fireedit/errors.hpp"

namespace fireedit {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty means "all zero"
  bool requires_grad = false;
  bool is_leaf = true;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Optimizer and initializer access to leaf values.
  std::span<T> mutable_data();
  T item() const;
  T operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return node_->is_leaf; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient values; zeros when nothing has been accumulated yet.
  std::vector<T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad() { node_->grad.clear(); }

  // Copy of the values with no tape history.
  Tensor detach() const;

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Ordered record of executed differentiable operations.
template <typename T>
class GradTape {
 public:
  struct Entry {
    const char* op;
    std::shared_ptr<TensorNode<T>> output;
    std::function<void()> backward;
  };

  void record(const char* op, const Tensor<T>& output, std::function<void()> backward);

  // Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad ancestor.
  // Intermediate gradients are recomputed on each call; leaf gradients
  // accumulate, so two calls leave exactly twice the leaf gradients.
  void backward(const Tensor<T>& loss);

  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  std::span<const Entry> entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
};

template <typename T>
GradTape<T>* active_tape();

// Makes `tape` the active tape of the calling thread for the scope lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(GradTape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape<T>* previous_;
};

// Convenience for single-use graphs: runs backward on the active tape.
template <typename T>
void backward(const Tensor<T>& loss);

// Deliberate faults for the mutation tests of the gradient checker. Each one
// flips the sign of a single term in one backward rule.
enum class BackwardFault { none, matmul, softmax, layer_norm, gelu, add_rowvec, conv2d, mul };
void inject_backward_fault(BackwardFault fault);
BackwardFault injected_backward_fault();

// Sparse row mixing: output row r = sum_i weight[i] * input row index[i] for
// i in [offsets[r], offsets[r+1]).
template <typename T>
struct RowMix {
  std::vector<std::size_t> offsets{0};
  std::vector<std::size_t> index;
  std::vector<T> weight;

  std::size_t rows() const { return offsets.size() - 1; }
  void add(std::size_t row, T w) {
    index.push_back(row);
    weight.push_back(w);
  }
  void end_row() { offsets.push_back(index.size()); }
};

// ---- primitives --------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// a[m x k] * b[n x k]^T
template <typename T>
Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s);

// Trailing-axis vector broadcast: x[... x d] op v[d].
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v);
template <typename T>
Tensor<T> mul_rowvec(const Tensor<T>& x, const Tensor<T>& v);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);

template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// Softmax over the last axis with per-row max subtraction. With causal=true,
// entry (i, j) of an m x n matrix is masked to exactly zero for j > i + n - m.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, bool causal = false);

// Normalizes each last-axis vector to zero mean and unit variance, then applies
// gain and bias when they are defined.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5));

// Splits the last axis into `groups` contiguous channel groups and normalizes
// each group over all leading positions together; gain and bias are
// per channel.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, std::size_t groups,
                     T eps = T(1e-5));

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::size_t> ids);
template <typename T>
Tensor<T> mix_rows(const Tensor<T>& x, const RowMix<T>& mix);

// Sum over rows of -log softmax(logits[row])[target[row]].
template <typename T>
Tensor<T> cross_entropy_from_logits(const Tensor<T>& logits, std::span<const std::size_t> targets);

// x[H x W x Cin] convolved with w[(k*k*Cin) x Cout] (im2col row order ky, kx,
// cin), zero padding `pad`, given stride. Result is [Ho x Wo x Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t kernel, std::size_t stride,
                 std::size_t pad);
// Nearest-neighbour 2x upsampling of [H x W x C].
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x);

// ---- composites --------------------------------------------------------------

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  const Tensor<T> d = sub(a, b);
  return mean(mul(d, d));
}

template <typename T>
bool all_finite(const Tensor<T>& x);

}  // namespace fireedit
