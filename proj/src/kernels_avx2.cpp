#include "fireedit/kernels.hpp"

#include <algorithm>

#if defined(__x86_64__) || defined(_M_X64)
#include <immintrin.h>
#define FIREEDIT_HAVE_X86 1
#define FIREEDIT_AVX2 __attribute__((target("avx2,fma")))
#else
#define FIREEDIT_HAVE_X86 0
#define FIREEDIT_AVX2
#endif

namespace fireedit::kernels::avx2 {

#if FIREEDIT_HAVE_X86

namespace {

// Lane traits so one micro-kernel body serves float and double.
template <typename T>
struct Lanes;

template <>
struct Lanes<float> {
  using V = __m256;
  static constexpr std::size_t width = 8;
  FIREEDIT_AVX2 static V zero() { return _mm256_setzero_ps(); }
  FIREEDIT_AVX2 static V load(const float* p) { return _mm256_loadu_ps(p); }
  FIREEDIT_AVX2 static void store(float* p, V v) { _mm256_storeu_ps(p, v); }
  FIREEDIT_AVX2 static V splat(float s) { return _mm256_set1_ps(s); }
  FIREEDIT_AVX2 static V fmadd(V a, V b, V c) { return _mm256_fmadd_ps(a, b, c); }
  FIREEDIT_AVX2 static V add(V a, V b) { return _mm256_add_ps(a, b); }
  FIREEDIT_AVX2 static float hsum(V v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    __m128 shuf = _mm_movehdup_ps(lo);
    __m128 sums = _mm_add_ps(lo, shuf);
    shuf = _mm_movehl_ps(shuf, sums);
    sums = _mm_add_ss(sums, shuf);
    return _mm_cvtss_f32(sums);
  }
};

template <>
struct Lanes<double> {
  using V = __m256d;
  static constexpr std::size_t width = 4;
  FIREEDIT_AVX2 static V zero() { return _mm256_setzero_pd(); }
  FIREEDIT_AVX2 static V load(const double* p) { return _mm256_loadu_pd(p); }
  FIREEDIT_AVX2 static void store(double* p, V v) { _mm256_storeu_pd(p, v); }
  FIREEDIT_AVX2 static V splat(double s) { return _mm256_set1_pd(s); }
  FIREEDIT_AVX2 static V fmadd(V a, V b, V c) { return _mm256_fmadd_pd(a, b, c); }
  FIREEDIT_AVX2 static V add(V a, V b) { return _mm256_add_pd(a, b); }
  FIREEDIT_AVX2 static double hsum(V v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d high64 = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, high64));
  }
};

// Rows x (Vecs * width) block of C; accumulators stay in registers across
// the whole k loop. a[r, p] lives at a[r * rs + p * ks].
template <typename T, std::size_t Rows, std::size_t Vecs>
FIREEDIT_AVX2 inline void tile(std::size_t n, std::size_t k, const T* a, std::size_t rs, std::size_t ks, const T* b,
                               T* c, std::size_t j, bool accumulate) {
  using L = Lanes<T>;
  typename L::V acc[Rows][Vecs];
  for (std::size_t r = 0; r < Rows; ++r)
    for (std::size_t v = 0; v < Vecs; ++v) acc[r][v] = accumulate ? L::load(c + r * n + j + v * L::width) : L::zero();
  for (std::size_t p = 0; p < k; ++p) {
    typename L::V bv[Vecs];
    for (std::size_t v = 0; v < Vecs; ++v) bv[v] = L::load(b + p * n + j + v * L::width);
    for (std::size_t r = 0; r < Rows; ++r) {
      const typename L::V av = L::splat(a[r * rs + p * ks]);
      for (std::size_t v = 0; v < Vecs; ++v) acc[r][v] = L::fmadd(av, bv[v], acc[r][v]);
    }
  }
  for (std::size_t r = 0; r < Rows; ++r)
    for (std::size_t v = 0; v < Vecs; ++v) L::store(c + r * n + j + v * L::width, acc[r][v]);
}

template <typename T, std::size_t Rows>
FIREEDIT_AVX2 void row_block(std::size_t n, std::size_t k, const T* a, std::size_t rs, std::size_t ks, const T* b,
                             T* c, bool accumulate) {
  using L = Lanes<T>;
  std::size_t j = 0;
  for (; j + 2 * L::width <= n; j += 2 * L::width) tile<T, Rows, 2>(n, k, a, rs, ks, b, c, j, accumulate);
  for (; j + L::width <= n; j += L::width) tile<T, Rows, 1>(n, k, a, rs, ks, b, c, j, accumulate);
  for (; j < n; ++j) {
    for (std::size_t r = 0; r < Rows; ++r) {
      T s = accumulate ? c[r * n + j] : T(0);
      for (std::size_t p = 0; p < k; ++p) s += a[r * rs + p * ks] * b[p * n + j];
      c[r * n + j] = s;
    }
  }
}

template <typename T>
FIREEDIT_AVX2 void gemm_impl(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t rs,
                             std::size_t ks, const T* b, T* c, bool accumulate) {
  std::size_t i = 0;
  for (; i + 6 <= m; i += 6) row_block<T, 6>(n, k, a + i * rs, rs, ks, b, c + i * n, accumulate);
  for (; i + 2 <= m; i += 2) row_block<T, 2>(n, k, a + i * rs, rs, ks, b, c + i * n, accumulate);
  for (; i < m; ++i) row_block<T, 1>(n, k, a + i * rs, rs, ks, b, c + i * n, accumulate);
}

template <typename T>
FIREEDIT_AVX2 void axpy_impl(std::size_t n, T alpha, const T* x, T* y) {
  using L = Lanes<T>;
  const typename L::V av = L::splat(alpha);
  std::size_t i = 0;
  for (; i + L::width <= n; i += L::width) L::store(y + i, L::fmadd(av, L::load(x + i), L::load(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
FIREEDIT_AVX2 T dot_impl(std::size_t n, const T* x, const T* y) {
  using L = Lanes<T>;
  typename L::V acc0 = L::zero();
  typename L::V acc1 = L::zero();
  std::size_t i = 0;
  for (; i + 2 * L::width <= n; i += 2 * L::width) {
    acc0 = L::fmadd(L::load(x + i), L::load(y + i), acc0);
    acc1 = L::fmadd(L::load(x + i + L::width), L::load(y + i + L::width), acc1);
  }
  for (; i + L::width <= n; i += L::width) acc0 = L::fmadd(L::load(x + i), L::load(y + i), acc0);
  T s = L::hsum(L::add(acc0, acc1));
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

FIREEDIT_AVX2 void adam_impl(std::size_t n, float* w, const float* g, float* m, float* v, float clip, float beta1,
                             float beta2, float step, float inv_bc2, float eps) {
  const __m256 vc = _mm256_set1_ps(clip), b1 = _mm256_set1_ps(beta1), c1 = _mm256_set1_ps(1.0f - beta1);
  const __m256 b2 = _mm256_set1_ps(beta2), c2 = _mm256_set1_ps(1.0f - beta2);
  const __m256 vs = _mm256_set1_ps(step), vi = _mm256_set1_ps(inv_bc2), ve = _mm256_set1_ps(eps);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 gi = _mm256_mul_ps(_mm256_loadu_ps(g + i), vc);
    const __m256 mi = _mm256_add_ps(_mm256_mul_ps(b1, _mm256_loadu_ps(m + i)), _mm256_mul_ps(c1, gi));
    const __m256 vv = _mm256_add_ps(_mm256_mul_ps(b2, _mm256_loadu_ps(v + i)), _mm256_mul_ps(_mm256_mul_ps(c2, gi), gi));
    _mm256_storeu_ps(m + i, mi);
    _mm256_storeu_ps(v + i, vv);
    const __m256 den = _mm256_add_ps(_mm256_sqrt_ps(_mm256_mul_ps(vv, vi)), ve);
    _mm256_storeu_ps(w + i, _mm256_sub_ps(_mm256_loadu_ps(w + i), _mm256_div_ps(_mm256_mul_ps(vs, mi), den)));
  }
  scalar::adam_update(n - i, w + i, g + i, m + i, v + i, clip, beta1, beta2, step, inv_bc2, eps);
}

}  // namespace

void gemm(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
          bool accumulate) {
  gemm_impl(m, n, k, a, k, 1, b, c, accumulate);
}
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
          bool accumulate) {
  gemm_impl(m, n, k, a, k, 1, b, c, accumulate);
}
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
             bool accumulate) {
  gemm_impl(m, n, k, a, 1, m, b, c, accumulate);
}
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate) {
  gemm_impl(m, n, k, a, 1, m, b, c, accumulate);
}
void axpy(std::size_t n, float alpha, const float* x, float* y) { axpy_impl(n, alpha, x, y); }
void axpy(std::size_t n, double alpha, const double* x, double* y) { axpy_impl(n, alpha, x, y); }
float dot(std::size_t n, const float* x, const float* y) { return dot_impl(n, x, y); }
double dot(std::size_t n, const double* x, const double* y) { return dot_impl(n, x, y); }
void adam_update(std::size_t n, float* w, const float* g, float* m, float* v, float clip, float beta1, float beta2,
                 float step, float inv_bc2, float eps) {
  adam_impl(n, w, g, m, v, clip, beta1, beta2, step, inv_bc2, eps);
}

#else  // no x86: forward to the reference kernels

void gemm(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
          bool accumulate) {
  scalar::gemm(m, n, k, a, b, c, accumulate);
}
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
          bool accumulate) {
  scalar::gemm(m, n, k, a, b, c, accumulate);
}
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
             bool accumulate) {
  scalar::gemm_tn(m, n, k, a, b, c, accumulate);
}
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate) {
  scalar::gemm_tn(m, n, k, a, b, c, accumulate);
}
void axpy(std::size_t n, float alpha, const float* x, float* y) { scalar::axpy(n, alpha, x, y); }
void axpy(std::size_t n, double alpha, const double* x, double* y) { scalar::axpy(n, alpha, x, y); }
float dot(std::size_t n, const float* x, const float* y) { return scalar::dot(n, x, y); }
double dot(std::size_t n, const double* x, const double* y) { return scalar::dot(n, x, y); }
void adam_update(std::size_t n, float* w, const float* g, float* m, float* v, float clip, float beta1, float beta2,
                 float step, float inv_bc2, float eps) {
  scalar::adam_update(n, w, g, m, v, clip, beta1, beta2, step, inv_bc2, eps);
}

#endif

}  // namespace fireedit::kernels::avx2
