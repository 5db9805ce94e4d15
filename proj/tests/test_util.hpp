#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "rng.hpp"
#include "tensor.hpp"

namespace mvb::test {

inline double rel_err(double got, double want) {
  const double denom = std::max(std::abs(want), 1e-12);
  return std::abs(got - want) / denom;
}

// Central finite difference of a scalar function at one coordinate of x.
inline double central_diff(const std::function<double()>& eval, double* slot, double h = 1e-5) {
  const double saved = *slot;
  *slot = saved + h;
  const double fp = eval();
  *slot = saved - h;
  const double fm = eval();
  *slot = saved;
  return (fp - fm) / (2.0 * h);
}

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace mvb::test
