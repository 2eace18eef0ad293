#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

namespace test_oracles {

// Independent oracle for q = 1: maximize sum log(1 + lambda g_i) over a
// lambda grid of step 1e-6 spanning the feasible interval. The objective
// is concave in lambda, so a ternary search over grid indices returns the
// exact grid argmax without scanning every point.
inline Eigen::VectorXd el_grid_oracle(const Eigen::VectorXd& g, double total) {
  const double m = static_cast<double>(g.size());
  double lo = -1e300, hi = 1e300;
  for (double gi : g) {
    // Keep every weight at most `total`: 1 + lambda g_i >= 1/m.
    if (gi > 0) lo = std::max(lo, (1.0 / m - 1.0) / gi);
    if (gi < 0) hi = std::min(hi, (1.0 / m - 1.0) / gi);
  }
  const double step = 1e-6;
  const long long count = static_cast<long long>(std::floor((hi - lo) / step));
  auto value = [&](long long k) {
    const double lambda = lo + step * static_cast<double>(k);
    double s = 0.0;
    for (double gi : g) s += std::log(1.0 + lambda * gi);
    return s;
  };
  long long a = 0, b = count;
  while (b - a > 2) {
    const long long m1 = a + (b - a) / 3, m2 = b - (b - a) / 3;
    if (value(m1) < value(m2)) a = m1 + 1; else b = m2;
  }
  long long best = a;
  for (long long k = a; k <= b; ++k)
    if (value(k) > value(best)) best = k;
  const double lambda = lo + step * static_cast<double>(best);
  return (total / m) / ((g.array() * lambda) + 1.0);
}

}  // namespace test_oracles
