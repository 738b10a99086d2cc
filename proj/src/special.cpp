#include "gemcl/special.hpp"

#include <array>
#include <cmath>
#include <numbers>

namespace gemcl::special {
namespace {

constexpr double kLanczosG = 7.0;
constexpr std::array<double, 9> kLanczos = {
    0.99999999999980993,     676.5203681218851,     -1259.1392167224028,
    771.32342877765313,      -176.61502916214059,   12.507343278686905,
    -0.13857109526572012,    9.9843695780195716e-6, 1.5056327351493116e-7};

}  // namespace

double lgamma(double x) {
  if (x < 0.5) {
    // Γ(x)Γ(1−x) = π / sin(πx)
    return std::log(std::numbers::pi / std::fabs(std::sin(std::numbers::pi * x))) -
           lgamma(1.0 - x);
  }
  const double xm1 = x - 1.0;
  double a = kLanczos[0];
  for (std::size_t i = 1; i < kLanczos.size(); ++i) {
    a += kLanczos[i] / (xm1 + static_cast<double>(i));
  }
  const double t = xm1 + kLanczosG + 0.5;
  return 0.5 * std::log(2.0 * std::numbers::pi) + (xm1 + 0.5) * std::log(t) - t +
         std::log(a);
}

double digamma(double x) {
  if (x < 0.5) {
    return digamma(1.0 - x) - std::numbers::pi / std::tan(std::numbers::pi * x);
  }
  double shift = 0.0;
  while (x < 10.0) {
    shift -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // Bernoulli-number tail: 1/12, 1/120, 1/252, 1/240, 1/132, 691/32760
  const double tail =
      inv2 * (1.0 / 12.0 -
              inv2 * (1.0 / 120.0 -
                      inv2 * (1.0 / 252.0 -
                              inv2 * (1.0 / 240.0 -
                                      inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0))))));
  return shift + std::log(x) - 0.5 * inv - tail;
}

}  // namespace gemcl::special
