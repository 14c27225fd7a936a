#pragma once

// Dense arithmetic kernels behind the tensor ops.
//
// Every kernel has a portable scalar reference and an AVX2/FMA variant. The
// variant is selected once at startup from the CPU feature bits; tests can pin
// either one with force_isa() and compare them.

#include <cstddef>
#include <string_view>

namespace fireedit::kernels {

enum class Isa { scalar, avx2 };

// Highest ISA the running CPU supports.
Isa detected_isa();
// ISA used by the dispatching entry points below.
Isa active_isa();
// Pin the ISA (clamped to what the CPU supports). Not thread-safe; call
// before any concurrent use.
void force_isa(Isa isa);
std::string_view isa_name(Isa isa);

// C[m x n] (+)= A[m x k] * B[k x n], all row-major and contiguous.
void gemm(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
          bool accumulate);
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
          bool accumulate);
// Same, with A stored transposed: C[m x n] (+)= A^T * B for A[k x m].
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
             bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate);

// y += alpha * x
void axpy(std::size_t n, float alpha, const float* x, float* y);
void axpy(std::size_t n, double alpha, const double* x, double* y);

float dot(std::size_t n, const float* x, const float* y);
double dot(std::size_t n, const double* x, const double* y);

// One Adam update over n entries; g is scaled by `clip` first and
// step = lr / (1 - beta1^t), inv_bc2 = 1 / (1 - beta2^t).
void adam_update(std::size_t n, float* w, const float* g, float* m, float* v, float clip, float beta1, float beta2,
                 float step, float inv_bc2, float eps);

// Direct access to one implementation, used by the equivalence tests.
namespace scalar {
void gemm(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
          bool accumulate);
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
          bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
             bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate);
void axpy(std::size_t n, float alpha, const float* x, float* y);
void axpy(std::size_t n, double alpha, const double* x, double* y);
float dot(std::size_t n, const float* x, const float* y);
double dot(std::size_t n, const double* x, const double* y);
void adam_update(std::size_t n, float* w, const float* g, float* m, float* v, float clip, float beta1, float beta2,
                 float step, float inv_bc2, float eps);
}  // namespace scalar

namespace avx2 {
void gemm(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
          bool accumulate);
void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
          bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
             bool accumulate);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate);
void axpy(std::size_t n, float alpha, const float* x, float* y);
void axpy(std::size_t n, double alpha, const double* x, double* y);
float dot(std::size_t n, const float* x, const float* y);
double dot(std::size_t n, const double* x, const double* y);
void adam_update(std::size_t n, float* w, const float* g, float* m, float* v, float clip, float beta1, float beta2,
                 float step, float inv_bc2, float eps);
}  // namespace avx2

}  // namespace fireedit::kernels
