#pragma once

#include <type_traits>

#include "flowfit/core.hpp"

namespace flowfit {

namespace detail {

template <typename R>
double as_scalar(const R& r) {
  if constexpr (std::is_arithmetic_v<R>) {
    return static_cast<double>(r);
  } else {
    if (r.size() != 1) {
      throw Error("finite_difference_gradient: function output has " + std::to_string(r.size()) +
                  " elements, expected a scalar");
    }
    return static_cast<double>(r(0));
  }
}

}  // namespace detail

// Central-difference gradient of a scalar function f: R^n -> R. `f` may
// return an arithmetic type or a one-element Eigen vector.
template <typename F>
VecX<double> finite_difference_gradient(F&& f, const VecX<double>& x, double eps = 1e-6) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw Error("finite_difference_gradient: eps must lie in [1e-7, 1e-3]");
  }
  VecX<double> g(x.size());
  VecX<double> xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + eps;
    const double fp = detail::as_scalar(f(xp));
    xp[i] = orig - eps;
    const double fm = detail::as_scalar(f(xp));
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

// max_i |a_i - b_i| / max(|a|_inf, |b|_inf, floor)
inline double relative_error(const VecX<double>& a, const VecX<double>& b, double floor = 1e-8) {
  const double scale = std::max({a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff(), floor});
  return (a - b).cwiseAbs().maxCoeff() / scale;
}

}  // namespace flowfit
