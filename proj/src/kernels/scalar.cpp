#include "gemcl/kernels.hpp"

namespace gemcl::kernels {
namespace {

double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

double sum(const double* a, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i];
  return acc;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void add(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void mul_acc(const double* a, const double* b, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a[i] * b[i];
}

void power(const double* z, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = z[2 * i] * z[2 * i] + z[2 * i + 1] * z[2 * i + 1];
  }
}

void accumulate_moments(const double* x, double* s, double* s2, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    s[i] += x[i];
    s2[i] += x[i] * x[i];
  }
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{Isa::Scalar, "scalar", dot,     sum,  axpy,
                                 add,         mul,      mul_acc, power,
                                 accumulate_moments};
  return table;
}

}  // namespace gemcl::kernels
