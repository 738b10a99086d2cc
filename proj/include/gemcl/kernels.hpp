#pragma once

// Data-parallel inner loops shared by the autodiff engine, the MFCC
// frontend and the generative head.
//
// Every kernel has a scalar reference implementation and optional SIMD
// variants (AVX2 on x86-64, NEON on aarch64). The variant is chosen once at
// startup from the CPU's capabilities and can be pinned with the
// GEMCL_ISA environment variable ("scalar", "avx2", "neon").
//
// Element-wise kernels (add, mul, axpy, accumulate_moments, ...) perform the
// same IEEE operations in the same order as the scalar code, so every variant
// produces bit-identical results. Reductions (dot, sum) use a different
// association order in the vector variants and agree with the scalar
// reference to rounding only.

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace gemcl::kernels {

enum class Isa { Scalar, Avx2, Neon };

struct KernelTable {
  Isa isa;
  const char* name;
  double (*dot)(const double* a, const double* b, std::size_t n);
  double (*sum)(const double* a, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // out = a + b, out = a * b (out may alias either input)
  void (*add)(const double* a, const double* b, double* out, std::size_t n);
  void (*mul)(const double* a, const double* b, double* out, std::size_t n);
  // y += a * b
  void (*mul_acc)(const double* a, const double* b, double* y, std::size_t n);
  // out = re^2 + im^2 from interleaved complex pairs
  void (*power)(const double* interleaved, double* out, std::size_t n);
  // sum += x; sum_sq += x * x
  void (*accumulate_moments)(const double* x, double* sum, double* sum_sq,
                             std::size_t n);
};

const KernelTable& scalar_table();
// nullptr when the variant was not compiled into this binary or the CPU
// cannot run it.
const KernelTable* avx2_table();
const KernelTable* neon_table();

// All tables usable on this machine, scalar first.
std::vector<const KernelTable*> available_tables();

const KernelTable& active();
// Pins the dispatch table. Throws if the requested ISA is unavailable.
void select(Isa isa);
Isa parse_isa(std::string_view name);

inline double dot(std::span<const double> a, std::span<const double> b) {
  return active().dot(a.data(), b.data(), a.size());
}
inline double sum(std::span<const double> a) {
  return active().sum(a.data(), a.size());
}
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  active().axpy(alpha, x.data(), y.data(), x.size());
}
inline void add(std::span<const double> a, std::span<const double> b,
                std::span<double> out) {
  active().add(a.data(), b.data(), out.data(), out.size());
}
inline void mul(std::span<const double> a, std::span<const double> b,
                std::span<double> out) {
  active().mul(a.data(), b.data(), out.data(), out.size());
}
inline void mul_acc(std::span<const double> a, std::span<const double> b,
                    std::span<double> y) {
  active().mul_acc(a.data(), b.data(), y.data(), y.size());
}
inline void accumulate_moments(std::span<const double> x, std::span<double> s,
                               std::span<double> s2) {
  active().accumulate_moments(x.data(), s.data(), s2.data(), x.size());
}

// Row-major C[m x n] (+)= A[m x k] * B[k x n]. Built from axpy so the
// accumulation order per output element is k = 0..k-1 on every ISA.
void gemm(const double* a, const double* b, double* c, std::size_t m,
          std::size_t k, std::size_t n, bool accumulate = false);
// C[m x n] (+)= A[m x k] * B[n x k]^T, one dot per output element.
void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate = false);
// C[k x n] (+)= A[m x k]^T * B[m x n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate = false);

}  // namespace gemcl::kernels
