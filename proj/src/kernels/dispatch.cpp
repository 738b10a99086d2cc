#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "gemcl/kernels.hpp"

namespace gemcl::kernels {
namespace {

const KernelTable* detect() {
  if (const char* env = std::getenv("GEMCL_ISA"); env != nullptr && *env) {
    const Isa isa = parse_isa(env);
    for (const KernelTable* t : available_tables()) {
      if (t->isa == isa) return t;
    }
    throw std::runtime_error(std::string("GEMCL_ISA=") + env +
                             " is not available on this machine");
  }
  if (const KernelTable* t = avx2_table()) return t;
  if (const KernelTable* t = neon_table()) return t;
  return &scalar_table();
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> current{detect()};
  return current;
}

}  // namespace

std::vector<const KernelTable*> available_tables() {
  std::vector<const KernelTable*> out{&scalar_table()};
  if (const KernelTable* t = avx2_table()) out.push_back(t);
  if (const KernelTable* t = neon_table()) out.push_back(t);
  return out;
}

const KernelTable& active() { return *slot().load(std::memory_order_relaxed); }

void select(Isa isa) {
  for (const KernelTable* t : available_tables()) {
    if (t->isa == isa) {
      slot().store(t);
      return;
    }
  }
  throw std::runtime_error("requested kernel ISA is not available");
}

Isa parse_isa(std::string_view name) {
  if (name == "scalar") return Isa::Scalar;
  if (name == "avx2") return Isa::Avx2;
  if (name == "neon") return Isa::Neon;
  throw std::invalid_argument("unknown ISA '" + std::string(name) + "'");
}

void gemm(const double* a, const double* b, double* c, std::size_t m,
          std::size_t k, std::size_t n, bool accumulate) {
  const KernelTable& t = active();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = c + i * n;
    if (!accumulate) std::fill(row, row + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip != 0.0) t.axpy(aip, b + p * n, row, n);
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  const KernelTable& t = active();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double v = t.dot(a + i * k, b + j * k, k);
      c[i * n + j] = accumulate ? c[i * n + j] + v : v;
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m,
             std::size_t k, std::size_t n, bool accumulate) {
  const KernelTable& t = active();
  if (!accumulate) std::fill(c, c + k * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip != 0.0) t.axpy(aip, b + i * n, c + p * n, n);
    }
  }
}

}  // namespace gemcl::kernels
