#include "fireedit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "fireedit/kernels.hpp"

namespace fireedit {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

namespace {

BackwardFault g_fault = BackwardFault::none;

template <typename T>
T fault_sign(BackwardFault rule) {
  return g_fault == rule ? T(-1) : T(1);
}

template <typename T>
GradTape<T>*& tape_slot() {
  thread_local GradTape<T>* slot = nullptr;
  return slot;
}

template <typename T>
std::vector<T>& gbuf(TensorNode<T>& n) {
  if (n.grad.empty()) n.grad.assign(n.data.size(), T(0));
  return n.grad;
}

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  for (const Tensor<T>* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

template <typename T>
void attach(const char* op, Tensor<T>& out, std::function<void()> fn) {
  out.node()->requires_grad = true;
  out.node()->is_leaf = false;
  active_tape<T>()->record(op, out, std::move(fn));
}

template <typename T>
std::vector<T> transposed(const T* src, std::size_t rows, std::size_t cols) {
  constexpr std::size_t kBlock = 16;
  std::vector<T> t(rows * cols);
  for (std::size_t i0 = 0; i0 < rows; i0 += kBlock)
    for (std::size_t j0 = 0; j0 < cols; j0 += kBlock)
      for (std::size_t i = i0; i < std::min(rows, i0 + kBlock); ++i)
        for (std::size_t j = j0; j < std::min(cols, j0 + kBlock); ++j) t[j * rows + i] = src[i * cols + j];
  return t;
}

// dst += sign * A[m x k] * B[k x n]
template <typename T>
void gemm_into(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* dst, T sign) {
  if (sign == T(1)) {
    kernels::gemm(m, n, k, a, b, dst, true);
    return;
  }
  std::vector<T> tmp(m * n);
  kernels::gemm(m, n, k, a, b, tmp.data(), false);
  kernels::axpy(m * n, sign, tmp.data(), dst);
}

// dst += sign * A^T * B with A stored [k x m]
template <typename T>
void gemm_tn_into(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* dst, T sign) {
  if (sign == T(1)) {
    kernels::gemm_tn(m, n, k, a, b, dst, true);
    return;
  }
  std::vector<T> tmp(m * n);
  kernels::gemm_tn(m, n, k, a, b, tmp.data(), false);
  kernels::axpy(m * n, sign, tmp.data(), dst);
}

void require_rank(const char* op, const Shape& s, std::size_t rank) {
  if (s.size() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(s));
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace

void inject_backward_fault(BackwardFault fault) { g_fault = fault; }
BackwardFault injected_backward_fault() { return g_fault; }

// ---- Tensor ------------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<TensorNode<T>>()) {
  if (shape_numel(shape) != data.size())
    throw DimensionError("tensor: shape " + shape_str(shape) + " does not hold " +
                         std::to_string(data.size()) + " values");
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{1}, std::vector<T>{value});
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->is_leaf) throw ContractError("mutable_data: only leaf tensors are writable");
  return node_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ContractError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (!node_->is_leaf) throw ContractError("set_requires_grad: only leaf tensors");
  node_->requires_grad = on;
  return *this;
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  if (node_->grad.empty()) return std::vector<T>(node_->data.size(), T(0));
  return node_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  return gbuf(*node_);
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->data);
}

// ---- tape --------------------------------------------------------------------

template <typename T>
void GradTape<T>::record(const char* op, const Tensor<T>& output, std::function<void()> backward) {
  entries_.push_back(Entry{op, output.node(), std::move(backward)});
}

template <typename T>
void GradTape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  if (!loss.requires_grad()) throw ContractError("backward: loss is not connected to any parameter");
  TensorNode<T>& root = *loss.node();
  if (root.is_leaf) {
    gbuf(root)[0] += T(1);
    return;
  }
  const bool on_tape = std::any_of(entries_.begin(), entries_.end(),
                                   [&](const Entry& e) { return e.output.get() == &root; });
  if (!on_tape) throw ContractError("backward: loss was not recorded on this tape");
  for (Entry& e : entries_) e.output->grad.clear();
  root.grad.assign(1, T(1));
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
    if (!it->output->grad.empty()) it->backward();
}

template <typename T>
GradTape<T>* active_tape() {
  return tape_slot<T>();
}

template <typename T>
TapeScope<T>::TapeScope(GradTape<T>& tape) : previous_(tape_slot<T>()) {
  tape_slot<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  tape_slot<T>() = previous_;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  GradTape<T>* tape = active_tape<T>();
  if (tape == nullptr) throw ContractError("backward: no active tape");
  tape->backward(loss);
}

// ---- linear algebra ----------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("matmul", a.shape(), 2);
  require_rank("matmul", b.shape(), 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  std::vector<T> out(m * n);
  kernels::gemm(m, n, k, a.data().data(), b.data().data(), out.data(), false);
  Tensor<T> r({m, n}, std::move(out));
  if (tracking<T>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = r.node();
    attach<T>("matmul", r, [an, bn, on, m, n, k] {
      const T* g = on->grad.data();
      if (an->requires_grad) {
        const auto bt = transposed(bn->data.data(), k, n);
        gemm_into(m, k, n, g, bt.data(), gbuf(*an).data(), fault_sign<T>(BackwardFault::matmul));
      }
      if (bn->requires_grad) {
        gemm_tn_into(k, n, m, an->data.data(), g, gbuf(*bn).data(), T(1));
      }
    });
  }
  return r;
}

template <typename T>
Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("matmul_bt", a.shape(), 2);
  require_rank("matmul_bt", b.shape(), 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw DimensionError("matmul_bt: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  const auto bt = transposed(b.data().data(), n, k);
  std::vector<T> out(m * n);
  kernels::gemm(m, n, k, a.data().data(), bt.data(), out.data(), false);
  Tensor<T> r({m, n}, std::move(out));
  if (tracking<T>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = r.node();
    attach<T>("matmul_bt", r, [an, bn, on, m, n, k] {
      const T* g = on->grad.data();
      if (an->requires_grad)
        gemm_into(m, k, n, g, bn->data.data(), gbuf(*an).data(), fault_sign<T>(BackwardFault::matmul));
      if (bn->requires_grad) {
        gemm_tn_into(n, k, m, g, an->data.data(), gbuf(*bn).data(), T(1));
      }
    });
  }
  return r;
}

// ---- elementwise -------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor<T> r(a.shape(), std::move(out));
  if (tracking<T>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = r.node();
    attach<T>("add", r, [an, bn, on] {
      const std::size_t n = on->grad.size();
      if (an->requires_grad) kernels::axpy(n, T(1), on->grad.data(), gbuf(*an).data());
      if (bn->requires_grad) kernels::axpy(n, T(1), on->grad.data(), gbuf(*bn).data());
    });
  }
  return r;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tensor<T> r(a.shape(), std::move(out));
  if (tracking<T>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = r.node();
    attach<T>("sub", r, [an, bn, on] {
      const std::size_t n = on->grad.size();
      if (an->requires_grad) kernels::axpy(n, T(1), on->grad.data(), gbuf(*an).data());
      if (bn->requires_grad) kernels::axpy(n, T(-1), on->grad.data(), gbuf(*bn).data());
    });
  }
  return r;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor<T> r(a.shape(), std::move(out));
  if (tracking<T>({&a, &b})) {
    auto an = a.node(), bn = b.node(), on = r.node();
    attach<T>("mul", r, [an, bn, on] {
      const auto& g = on->grad;
      const T sign = fault_sign<T>(BackwardFault::mul);
      if (an->requires_grad) {
        auto& ga = gbuf(*an);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += sign * g[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        auto& gb = gbuf(*bn);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
      }
    });
  }
  return r;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  Tensor<T> r(a.shape(), std::move(out));
  if (tracking<T>({&a})) {
    auto an = a.node(), on = r.node();
    attach<T>("scale", r, [an, on, s] { kernels::axpy(on->grad.size(), s, on->grad.data(), gbuf(*an).data()); });
  }
  return r;
}

template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  if (x.rank() == 0 || v.rank() != 1 || v.dim(0) != x.shape().back())
    throw DimensionError("add_rowvec: cannot broadcast " + shape_str(v.shape()) + " over " +
                         shape_str(x.shape()));
  const std::size_t d = v.dim(0), rows = x.size() / std::max<std::size_t>(d, 1);
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] + v[j];
  Tensor<T> r(x.shape(), std::move(out));
  if (tracking<T>({&x, &v})) {
    auto xn = x.node(), vn = v.node(), on = r.node();
    attach<T>("add_rowvec", r, [xn, vn, on, rows, d] {
      const auto& g = on->grad;
      if (xn->requires_grad) kernels::axpy(g.size(), T(1), g.data(), gbuf(*xn).data());
      if (vn->requires_grad) {
        auto& gv = gbuf(*vn);
        const T sign = fault_sign<T>(BackwardFault::add_rowvec);
        for (std::size_t r = 0; r < rows; ++r) kernels::axpy(d, sign, g.data() + r * d, gv.data());
      }
    });
  }
  return r;
}

template <typename T>
Tensor<T> mul_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  if (x.rank() == 0 || v.rank() != 1 || v.dim(0) != x.shape().back())
    throw DimensionError("mul_rowvec: cannot broadcast " + shape_str(v.shape()) + " over " +
                         shape_str(x.shape()));
  const std::size_t d = v.dim(0), rows = x.size() / std::max<std::size_t>(d, 1);
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[r * d + j] * v[j];
  Tensor<T> r(x.shape(), std::move(out));
  if (tracking<T>({&x, &v})) {
    auto xn = x.node(), vn = v.node(), on = r.node();
    attach<T>("mul_rowvec", r, [xn, vn, on, rows, d] {
      const auto& g = on->grad;
      if (xn->requires_grad) {
        auto& gx = gbuf(*xn);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] * vn->data[j];
      }
      if (vn->requires_grad) {
        auto& gv = gbuf(*vn);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gv[j] += g[r * d + j] * xn->data[r * d + j];
      }
    });
  }
  return r;
}

// ---- shape -------------------------------------------------------------------

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok)
      throw DimensionError("concat: incompatible shapes " + shape_str(first) + " and " + shape_str(s) +
                           " along axis " + std::to_string(axis));
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  Shape shape = first;
  shape[axis] = total;
  std::vector<T> out(outer * total * inner);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * chunk, chunk, out.data() + o * total * inner + offset);
    offset += chunk;
  }
  Tensor<T> r(std::move(shape), std::move(out));
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (active_tape<T>() != nullptr && any) {
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    auto on = r.node();
    attach<T>("concat", r, [nodes, on, outer, inner, total, axis] {
      std::size_t off = 0;
      for (const auto& pn : nodes) {
        const std::size_t chunk = pn->shape[axis] * inner;
        if (pn->requires_grad) {
          auto& gp = gbuf(*pn);
          for (std::size_t o = 0; o < outer; ++o)
            kernels::axpy(chunk, T(1), on->grad.data() + o * total * inner + off, gp.data() + o * chunk);
        }
        off += chunk;
      }
    });
  }
  return r;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.size() || begin > end || end > s[axis])
    throw ContractError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                        ") invalid on axis " + std::to_string(axis) + " of " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = end - begin, full = s[axis];
  Shape shape = s;
  shape[axis] = len;
  std::vector<T> out(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data().data() + (o * full + begin) * inner, len * inner, out.data() + o * len * inner);
  Tensor<T> r(std::move(shape), std::move(out));
  if (tracking<T>({&x})) {
    auto xn = x.node(), on = r.node();
    attach<T>("slice", r, [xn, on, outer, inner, len, full, begin] {
      auto& gx = gbuf(*xn);
      for (std::size_t o = 0; o < outer; ++o)
        kernels::axpy(len * inner, T(1), on->grad.data() + o * len * inner,
                      gx.data() + (o * full + begin) * inner);
    });
  }
  return r;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Tensor<T> r(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (tracking<T>({&x})) {
    auto xn = x.node(), on = r.node();
    attach<T>("reshape", r, [xn, on] { kernels::axpy(on->grad.size(), T(1), on->grad.data(), gbuf(*xn).data()); });
  }
  return r;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_rank("transpose", x.shape(), 2);
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor<T> r({n, m}, transposed(x.data().data(), m, n));
  if (tracking<T>({&x})) {
    auto xn = x.node(), on = r.node();
    attach<T>("transpose", r, [xn, on, m, n] {
      const auto back = transposed(on->grad.data(), n, m);
      kernels::axpy(back.size(), T(1), back.data(), gbuf(*xn).data());
    });
  }
  return r;
}

// ---- nonlinearities and reductions -----------------------------------------

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * x[i] * (T(1) + std::erf(x[i] * inv_sqrt2));
  Tensor<T> r(x.shape(), std::move(out));
  if (tracking<T>({&x})) {
    auto xn = x.node(), on = r.node();
    attach<T>("gelu", r, [xn, on, inv_sqrt2] {
      const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
      const T sign = fault_sign<T>(BackwardFault::gelu);
      auto& gx = gbuf(*xn);
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const T v = xn->data[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        gx[i] += on->grad[i] * (cdf + sign * v * pdf);
      }
    });
  }
  return r;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  Tensor<T> r = Tensor<T>::scalar(s);
  if (tracking<T>({&x})) {
    auto xn = x.node(), on = r.node();
    attach<T>("sum", r, [xn, on] {
      auto& gx = gbuf(*xn);
      const T g = on->grad[0];
      for (T& v : gx) v += g;
    });
  }
  return r;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) throw ContractError("mean: empty tensor");
  T s = 0;
  for (T v : x.data()) s += v;
  const T inv = T(1) / static_cast<T>(x.size());
  Tensor<T> r = Tensor<T>::scalar(s * inv);
  if (tracking<T>({&x})) {
    auto xn = x.node(), on = r.node();
    attach<T>("mean", r, [xn, on, inv] {
      auto& gx = gbuf(*xn);
      const T g = on->grad[0] * inv;
      for (T& v : gx) v += g;
    });
  }
  return r;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, bool causal) {
  if (x.rank() == 0) throw DimensionError("softmax_rows: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = n == 0 ? 0 : x.size() / n;
  for (T v : x.data())
    if (std::isnan(v)) throw NumericError("softmax_rows: NaN input");
  const long offset = static_cast<long>(n) - static_cast<long>(rows);
  std::vector<T> out(x.size(), T(0));
  for (std::size_t i = 0; i < rows; ++i) {
    const T* in = x.data().data() + i * n;
    T* o = out.data() + i * n;
    std::size_t width = n;
    if (causal) width = static_cast<std::size_t>(std::clamp<long>(static_cast<long>(i) + offset + 1, 0, static_cast<long>(n)));
    if (width == 0) continue;
    const T mx = *std::max_element(in, in + width);
    T z = 0;
    for (std::size_t j = 0; j < width; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    const T inv = T(1) / z;
    for (std::size_t j = 0; j < width; ++j) o[j] *= inv;
  }
  Tensor<T> r(x.shape(), std::move(out));
  if (tracking<T>({&x})) {
    auto xn = x.node(), on = r.node();
    attach<T>("softmax_rows", r, [xn, on, rows, n] {
      auto& gx = gbuf(*xn);
      const T sign = fault_sign<T>(BackwardFault::softmax);
      for (std::size_t i = 0; i < rows; ++i) {
        const T* y = on->data.data() + i * n;
        const T* g = on->grad.data() + i * n;
        T dotv = 0;
        for (std::size_t j = 0; j < n; ++j) dotv += g[j] * y[j];
        T* dst = gx.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) dst[j] += y[j] * (g[j] - sign * dotv);
      }
    });
  }
  return r;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if ((gain.defined() && (gain.rank() != 1 || gain.dim(0) != d)) ||
      (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d)))
    throw DimensionError("layer_norm: last axis of " + shape_str(x.shape()) +
                         " does not match gain/bias " +
                         (gain.defined() ? shape_str(gain.shape()) : std::string("-")) + "/" +
                         (bias.defined() ? shape_str(bias.shape()) : std::string("-")));
  const std::size_t rows = d == 0 ? 0 : x.size() / d;
  std::vector<T> xhat(x.size()), rstd(rows), out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (in[j] - mu) * rstd[r];
      xhat[r * d + j] = h;
      T y = h;
      if (gain.defined()) y *= gain[j];
      if (bias.defined()) y += bias[j];
      out[r * d + j] = y;
    }
  }
  Tensor<T> r(x.shape(), std::move(out));
  if (tracking<T>({&x, &gain, &bias})) {
    auto xn = x.node(), on = r.node();
    auto gn = gain.defined() ? gain.node() : nullptr;
    auto bn = bias.defined() ? bias.node() : nullptr;
    attach<T>("layer_norm", r, [xn, gn, bn, on, xhat = std::move(xhat), rstd = std::move(rstd), rows, d] {
      const auto& g = on->grad;
      if (gn && gn->requires_grad) {
        auto& gg = gbuf(*gn);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
      }
      if (bn && bn->requires_grad) {
        auto& gb = gbuf(*bn);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
      }
      if (xn->requires_grad) {
        auto& gx = gbuf(*xn);
        const T sign = fault_sign<T>(BackwardFault::layer_norm);
        std::vector<T> gh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_gh = 0, mean_ghx = 0;
          for (std::size_t j = 0; j < d; ++j) {
            gh[j] = g[r * d + j] * (gn ? gn->data[j] : T(1));
            mean_gh += gh[j];
            mean_ghx += gh[j] * xhat[r * d + j];
          }
          mean_gh /= static_cast<T>(d);
          mean_ghx /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j)
            gx[r * d + j] += rstd[r] * (gh[j] - mean_gh - sign * xhat[r * d + j] * mean_ghx);
        }
      }
    });
  }
  return r;
}

// ---- gathers -----------------------------------------------------------------

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, std::size_t groups, T eps) {
  if (x.rank() == 0) throw DimensionError("group_norm: scalar input");
  const std::size_t c = x.shape().back();
  if (groups == 0 || c % groups != 0)
    throw DimensionError("group_norm: " + std::to_string(c) + " channels do not split into " +
                         std::to_string(groups) + " groups");
  if (gain.rank() != 1 || gain.dim(0) != c || bias.rank() != 1 || bias.dim(0) != c)
    throw DimensionError("group_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " vs " + std::to_string(c) + " channels");
  const std::size_t rows = x.size() / c, width = c / groups;
  const T count = static_cast<T>(rows * width);
  const T* in = x.data().data();
  std::vector<T> xhat(x.size()), rstd(groups), out(x.size());
  for (std::size_t g = 0; g < groups; ++g) {
    T mu = 0;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = g * width; j < (g + 1) * width; ++j) mu += in[r * c + j];
    mu /= count;
    T var = 0;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = g * width; j < (g + 1) * width; ++j) var += (in[r * c + j] - mu) * (in[r * c + j] - mu);
    rstd[g] = T(1) / std::sqrt(var / count + eps);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = g * width; j < (g + 1) * width; ++j) {
        const T h = (in[r * c + j] - mu) * rstd[g];
        xhat[r * c + j] = h;
        out[r * c + j] = h * gain[j] + bias[j];
      }
  }
  Tensor<T> r(x.shape(), std::move(out));
  if (tracking<T>({&x, &gain, &bias})) {
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = r.node();
    attach<T>("group_norm", r, [=, xhat = std::move(xhat), rstd = std::move(rstd)] {
      const auto& g = on->grad;
      if (gn->requires_grad) {
        auto& gg = gbuf(*gn);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xhat[i * c + j];
      }
      if (bn->requires_grad) {
        auto& gb = gbuf(*bn);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
      }
      if (xn->requires_grad) {
        auto& gx = gbuf(*xn);
        const T sign = fault_sign<T>(BackwardFault::layer_norm);
        for (std::size_t k = 0; k < groups; ++k) {
          T mean_gh = 0, mean_ghx = 0;
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = k * width; j < (k + 1) * width; ++j) {
              const T gh = g[i * c + j] * gn->data[j];
              mean_gh += gh;
              mean_ghx += gh * xhat[i * c + j];
            }
          mean_gh /= count;
          mean_ghx /= count;
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = k * width; j < (k + 1) * width; ++j)
              gx[i * c + j] +=
                  rstd[k] * (g[i * c + j] * gn->data[j] - mean_gh - sign * xhat[i * c + j] * mean_ghx);
        }
      }
    });
  }
  return r;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::size_t> ids) {
  require_rank("embedding", table.shape(), 2);
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab)
      throw ContractError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                          std::to_string(vocab) + " rows");
    std::copy_n(table.data().data() + ids[i] * d, d, out.data() + i * d);
  }
  Tensor<T> r({ids.size(), d}, std::move(out));
  if (tracking<T>({&table})) {
    auto tn = table.node(), on = r.node();
    std::vector<std::size_t> idv(ids.begin(), ids.end());
    attach<T>("embedding", r, [tn, on, idv = std::move(idv), d] {
      auto& gt = gbuf(*tn);
      for (std::size_t i = 0; i < idv.size(); ++i)
        kernels::axpy(d, T(1), on->grad.data() + i * d, gt.data() + idv[i] * d);
    });
  }
  return r;
}

template <typename T>
Tensor<T> mix_rows(const Tensor<T>& x, const RowMix<T>& mix) {
  require_rank("mix_rows", x.shape(), 2);
  const std::size_t n = x.dim(0), c = x.dim(1), rows = mix.rows();
  for (std::size_t idx : mix.index)
    if (idx >= n) throw ContractError("mix_rows: source row " + std::to_string(idx) + " out of range");
  std::vector<T> out(rows * c, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = mix.offsets[r]; i < mix.offsets[r + 1]; ++i)
      kernels::axpy(c, mix.weight[i], x.data().data() + mix.index[i] * c, out.data() + r * c);
  Tensor<T> r({rows, c}, std::move(out));
  if (tracking<T>({&x})) {
    auto xn = x.node(), on = r.node();
    attach<T>("mix_rows", r, [xn, on, mix, c] {
      auto& gx = gbuf(*xn);
      for (std::size_t row = 0; row < mix.rows(); ++row)
        for (std::size_t i = mix.offsets[row]; i < mix.offsets[row + 1]; ++i)
          kernels::axpy(c, mix.weight[i], on->grad.data() + row * c, gx.data() + mix.index[i] * c);
    });
  }
  return r;
}

template <typename T>
Tensor<T> cross_entropy_from_logits(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  require_rank("cross_entropy_from_logits", logits.shape(), 2);
  const std::size_t rows = logits.dim(0), v = logits.dim(1);
  if (targets.size() != rows)
    throw DimensionError("cross_entropy_from_logits: " + std::to_string(targets.size()) +
                         " targets for " + shape_str(logits.shape()));
  std::vector<T> probs(rows * v);
  T loss = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= v) throw ContractError("cross_entropy_from_logits: target id out of range");
    const T* in = logits.data().data() + r * v;
    const T mx = *std::max_element(in, in + v);
    T z = 0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(in[j] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] = std::exp(in[j] - lse);
    loss += lse - in[targets[r]];
  }
  Tensor<T> r = Tensor<T>::scalar(loss);
  if (tracking<T>({&logits})) {
    auto ln = logits.node(), on = r.node();
    std::vector<std::size_t> tv(targets.begin(), targets.end());
    attach<T>("cross_entropy", r, [ln, on, probs = std::move(probs), tv = std::move(tv), rows, v] {
      auto& gl = gbuf(*ln);
      const T g = on->grad[0];
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < v; ++j)
          gl[r * v + j] += g * (probs[r * v + j] - (j == tv[r] ? T(1) : T(0)));
    });
  }
  return r;
}

// ---- spatial -----------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, std::size_t kernel, std::size_t stride,
                 std::size_t pad) {
  require_rank("conv2d", x.shape(), 3);
  require_rank("conv2d", w.shape(), 2);
  const std::size_t h = x.dim(0), wd = x.dim(1), cin = x.dim(2), cout = w.dim(1);
  const std::size_t kk = kernel * kernel * cin;
  if (w.dim(0) != kk)
    throw DimensionError("conv2d: weight " + shape_str(w.shape()) + " does not fit input " +
                         shape_str(x.shape()) + " with kernel " + std::to_string(kernel));
  if (stride == 0 || h + 2 * pad < kernel || wd + 2 * pad < kernel)
    throw DimensionError("conv2d: kernel larger than padded input " + shape_str(x.shape()));
  const std::size_t ho = (h + 2 * pad - kernel) / stride + 1, wo = (wd + 2 * pad - kernel) / stride + 1;
  std::vector<T> cols(ho * wo * kk, T(0));
  const T* xd = x.data().data();
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox) {
      T* row = cols.data() + (oy * wo + ox) * kk;
      for (std::size_t ky = 0; ky < kernel; ++ky) {
        const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t kx = 0; kx < kernel; ++kx) {
          const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
          if (ix < 0 || ix >= static_cast<long>(wd)) continue;
          std::copy_n(xd + (static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)) * cin, cin,
                      row + (ky * kernel + kx) * cin);
        }
      }
    }
  std::vector<T> out(ho * wo * cout);
  kernels::gemm(ho * wo, cout, kk, cols.data(), w.data().data(), out.data(), false);
  Tensor<T> r({ho, wo, cout}, std::move(out));
  if (tracking<T>({&x, &w})) {
    auto xn = x.node(), wn = w.node(), on = r.node();
    attach<T>("conv2d", r, [=, cols = std::move(cols)] {
      const T* g = on->grad.data();
      const std::size_t npix = ho * wo;
      if (wn->requires_grad) {
        gemm_tn_into(kk, cout, npix, cols.data(), g, gbuf(*wn).data(), fault_sign<T>(BackwardFault::conv2d));
      }
      if (xn->requires_grad) {
        const auto wt = transposed(wn->data.data(), kk, cout);
        std::vector<T> gcols(npix * kk);
        kernels::gemm(npix, kk, cout, g, wt.data(), gcols.data(), false);
        auto& gx = gbuf(*xn);
        for (std::size_t oy = 0; oy < ho; ++oy)
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const T* row = gcols.data() + (oy * wo + ox) * kk;
            for (std::size_t ky = 0; ky < kernel; ++ky) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t kx = 0; kx < kernel; ++kx) {
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (ix < 0 || ix >= static_cast<long>(wd)) continue;
                kernels::axpy(cin, T(1), row + (ky * kernel + kx) * cin,
                              gx.data() + (static_cast<std::size_t>(iy) * wd + static_cast<std::size_t>(ix)) * cin);
              }
            }
          }
      }
    });
  }
  return r;
}

template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x) {
  require_rank("upsample2x", x.shape(), 3);
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  std::vector<T> out(4 * h * w * c);
  for (std::size_t y = 0; y < 2 * h; ++y)
    for (std::size_t xx = 0; xx < 2 * w; ++xx)
      std::copy_n(x.data().data() + ((y / 2) * w + xx / 2) * c, c, out.data() + (y * 2 * w + xx) * c);
  Tensor<T> r({2 * h, 2 * w, c}, std::move(out));
  if (tracking<T>({&x})) {
    auto xn = x.node(), on = r.node();
    attach<T>("upsample2x", r, [xn, on, h, w, c] {
      auto& gx = gbuf(*xn);
      for (std::size_t y = 0; y < 2 * h; ++y)
        for (std::size_t xx = 0; xx < 2 * w; ++xx)
          kernels::axpy(c, T(1), on->grad.data() + (y * 2 * w + xx) * c, gx.data() + ((y / 2) * w + xx / 2) * c);
    });
  }
  return r;
}

template <typename T>
bool all_finite(const Tensor<T>& x) {
  for (T v : x.data())
    if (!std::isfinite(v)) return false;
  return true;
}

// ---- instantiation -----------------------------------------------------------

#define FIREEDIT_INSTANTIATE(T)                                                                       \
  template class Tensor<T>;                                                                           \
  template class GradTape<T>;                                                                         \
  template class TapeScope<T>;                                                                        \
  template GradTape<T>* active_tape<T>();                                                             \
  template void backward<T>(const Tensor<T>&);                                                        \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> matmul_bt<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                                   \
  template Tensor<T> add_rowvec<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> mul_rowvec<T>(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t);                           \
  template Tensor<T> slice<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t);               \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                             \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                                  \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                       \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                        \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                       \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&, bool);                                         \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);          \
  template Tensor<T> group_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, T); \
  template Tensor<T> embedding<T>(const Tensor<T>&, std::span<const std::size_t>);                    \
  template Tensor<T> mix_rows<T>(const Tensor<T>&, const RowMix<T>&);                                 \
  template Tensor<T> cross_entropy_from_logits<T>(const Tensor<T>&, std::span<const std::size_t>);    \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t,          \
                               std::size_t);                                                          \
  template Tensor<T> upsample2x<T>(const Tensor<T>&);                                                 \
  template bool all_finite<T>(const Tensor<T>&);

FIREEDIT_INSTANTIATE(float)
FIREEDIT_INSTANTIATE(double)

#undef FIREEDIT_INSTANTIATE

}  // namespace fireedit
