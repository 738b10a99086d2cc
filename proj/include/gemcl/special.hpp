#pragma once

namespace gemcl::special {

// log|Γ(x)| by the Lanczos approximation (g = 7, 9 terms); reflection below
// 0.5. Absolute error below 1e-10 on [0.5, 1e3].
double lgamma(double x);

// ψ(x) = d/dx log Γ(x): upward recurrence to x >= 10, then the asymptotic
// series. Reflection for x < 0.5.
double digamma(double x);

}  // namespace gemcl::special
