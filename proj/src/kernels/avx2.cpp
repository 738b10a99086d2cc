// Compiled with -mavx2 (without -mfma). Only reached after a runtime CPU check.
#include "gemcl/kernels.hpp"

#if defined(__x86_64__) && defined(__AVX2__)
#include <immintrin.h>

namespace gemcl::kernels {
namespace {

double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d shuf = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, shuf));
}

double dot(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_add_pd(acc0, _mm256_mul_pd(_mm256_loadu_pd(a + i),
                                             _mm256_loadu_pd(b + i)));
    acc1 = _mm256_add_pd(acc1, _mm256_mul_pd(_mm256_loadu_pd(a + i + 4),
                                             _mm256_loadu_pd(b + i + 4)));
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_add_pd(acc0, _mm256_mul_pd(_mm256_loadu_pd(a + i),
                                             _mm256_loadu_pd(b + i)));
  }
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

double sum(const double* a, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(a + i));
  double total = hsum(acc);
  for (; i < n; ++i) total += a[i];
  return total;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vy = _mm256_loadu_pd(y + i);
    vy = _mm256_add_pd(vy, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
    _mm256_storeu_pd(y + i, vy);
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void add(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void mul_acc(const double* a, const double* b, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d p = _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), p));
  }
  for (; i < n; ++i) y[i] += a[i] * b[i];
}

void power(const double* z, double* out, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    // (re0 im0 re1 im1), (re2 im2 re3 im3)
    __m256d p0 = _mm256_loadu_pd(z + 2 * i);
    __m256d p1 = _mm256_loadu_pd(z + 2 * i + 4);
    p0 = _mm256_mul_pd(p0, p0);
    p1 = _mm256_mul_pd(p1, p1);
    // hadd gives (p0[0]+p0[1], p1[0]+p1[1], p0[2]+p0[3], p1[2]+p1[3])
    __m256d h = _mm256_hadd_pd(p0, p1);
    h = _mm256_permute4x64_pd(h, 0b11011000);
    _mm256_storeu_pd(out + i, h);
  }
  for (; i < n; ++i) {
    out[i] = z[2 * i] * z[2 * i] + z[2 * i + 1] * z[2 * i + 1];
  }
}

void accumulate_moments(const double* x, double* s, double* s2, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vx = _mm256_loadu_pd(x + i);
    _mm256_storeu_pd(s + i, _mm256_add_pd(_mm256_loadu_pd(s + i), vx));
    _mm256_storeu_pd(s2 + i, _mm256_add_pd(_mm256_loadu_pd(s2 + i),
                                           _mm256_mul_pd(vx, vx)));
  }
  for (; i < n; ++i) {
    s[i] += x[i];
    s2[i] += x[i] * x[i];
  }
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable table{Isa::Avx2, "avx2", dot,     sum,  axpy,
                                 add,       mul,    mul_acc, power,
                                 accumulate_moments};
  __builtin_cpu_init();
  static const bool supported = __builtin_cpu_supports("avx2");
  return supported ? &table : nullptr;
}

}  // namespace gemcl::kernels

#else

namespace gemcl::kernels {
const KernelTable* avx2_table() { return nullptr; }
}  // namespace gemcl::kernels

#endif
