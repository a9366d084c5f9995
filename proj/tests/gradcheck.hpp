// Central finite-difference gradient checking used across the unit and
// acceptance suites. Always runs in double precision.
#pragma once

#include "solarformer/params.hpp"
#include "solarformer/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

namespace sf::testutil {

// Relative error with a floor so that near-zero gradient pairs compare on an
// absolute scale.
inline double rel_err(double a, double b, double floor = 1e-5) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

// Checks d(eval)/d(theta) against central differences for the elements listed
// in `indices` (all elements when empty). `eval` must recompute the scalar
// from current tensor contents. Returns the max relative error seen.
inline double fd_check_tensor(Tensor<double>& theta, const Tensor<double>& analytic,
                              const std::function<double()>& eval, double h = 1e-5,
                              std::vector<std::int64_t> indices = {}) {
  if (indices.empty()) {
    indices.resize(static_cast<std::size_t>(theta.numel()));
    for (std::int64_t i = 0; i < theta.numel(); ++i) indices[static_cast<std::size_t>(i)] = i;
  }
  double worst = 0.0;
  for (std::int64_t i : indices) {
    const double orig = theta[i];
    theta[i] = orig + h;
    const double fp = eval();
    theta[i] = orig - h;
    const double fm = eval();
    theta[i] = orig;
    const double fd = (fp - fm) / (2.0 * h);
    worst = std::max(worst, rel_err(analytic[i], fd));
  }
  return worst;
}

}  // namespace sf::testutil
