#include "fireedit/kernels.hpp"

#include <algorithm>
#include <cstdlib>
#include <cstring>

namespace fireedit::kernels {

namespace {

Isa probe() {
#if defined(__x86_64__) || defined(_M_X64)
  __builtin_cpu_init();
  if (__builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) return Isa::avx2;
#endif
  return Isa::scalar;
}

Isa initial_isa() {
  // FIREEDIT_ISA=scalar pins the reference kernels for a whole process.
  const char* env = std::getenv("FIREEDIT_ISA");
  if (env != nullptr && std::strcmp(env, "scalar") == 0) return Isa::scalar;
  return probe();
}

Isa g_active = initial_isa();

}  // namespace

Isa detected_isa() { return probe(); }
Isa active_isa() { return g_active; }

void force_isa(Isa isa) {
  g_active = (isa == Isa::avx2 && probe() != Isa::avx2) ? Isa::scalar : isa;
}

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

void gemm(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
          bool accumulate) {
  if (g_active == Isa::avx2)
    avx2::gemm(m, n, k, a, b, c, accumulate);
  else
    scalar::gemm(m, n, k, a, b, c, accumulate);
}

void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
          bool accumulate) {
  if (g_active == Isa::avx2)
    avx2::gemm(m, n, k, a, b, c, accumulate);
  else
    scalar::gemm(m, n, k, a, b, c, accumulate);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
             bool accumulate) {
  if (g_active == Isa::avx2)
    avx2::gemm_tn(m, n, k, a, b, c, accumulate);
  else
    scalar::gemm_tn(m, n, k, a, b, c, accumulate);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
             bool accumulate) {
  if (g_active == Isa::avx2)
    avx2::gemm_tn(m, n, k, a, b, c, accumulate);
  else
    scalar::gemm_tn(m, n, k, a, b, c, accumulate);
}

void axpy(std::size_t n, float alpha, const float* x, float* y) {
  if (g_active == Isa::avx2)
    avx2::axpy(n, alpha, x, y);
  else
    scalar::axpy(n, alpha, x, y);
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
  if (g_active == Isa::avx2)
    avx2::axpy(n, alpha, x, y);
  else
    scalar::axpy(n, alpha, x, y);
}

float dot(std::size_t n, const float* x, const float* y) {
  return g_active == Isa::avx2 ? avx2::dot(n, x, y) : scalar::dot(n, x, y);
}

double dot(std::size_t n, const double* x, const double* y) {
  return g_active == Isa::avx2 ? avx2::dot(n, x, y) : scalar::dot(n, x, y);
}

void adam_update(std::size_t n, float* w, const float* g, float* m, float* v, float clip, float beta1, float beta2,
                 float step, float inv_bc2, float eps) {
  if (g_active == Isa::avx2)
    avx2::adam_update(n, w, g, m, v, clip, beta1, beta2, step, inv_bc2, eps);
  else
    scalar::adam_update(n, w, g, m, v, clip, beta1, beta2, step, inv_bc2, eps);
}

}  // namespace fireedit::kernels
