#pragma once

#include <array>
#include <cmath>
#include <numbers>

#include "flowfit/core.hpp"

namespace flowfit {

template <typename T>
Mat3<T> skew(const Vec3<T>& w) {
  Mat3<T> m;
  m << T(0), -w.z(), w.y(), w.z(), T(0), -w.x(), -w.y(), w.x(), T(0);
  return m;
}

namespace detail {

// Coefficients of R = I + a [w]x + b [w]x^2 and the radial derivatives
// a'(t)/t, b'(t)/t, with Taylor expansions near zero.
template <typename T>
struct RodriguesCoeffs {
  T a, b, da_over_t, db_over_t;
};

template <typename T>
RodriguesCoeffs<T> rodrigues_coeffs(T t2) {
  using std::cos;
  using std::sin;
  using std::sqrt;
  RodriguesCoeffs<T> c;
  if (t2 < T(1e-8)) {
    c.a = T(1) - t2 / T(6) + t2 * t2 / T(120);
    c.b = T(0.5) - t2 / T(24) + t2 * t2 / T(720);
    c.da_over_t = T(-1) / T(3) + t2 / T(30);
    c.db_over_t = T(-1) / T(12) + t2 / T(180);
    return c;
  }
  const T t = sqrt(t2);
  const T s = sin(t), co = cos(t);
  c.a = s / t;
  c.b = (T(1) - co) / t2;
  c.da_over_t = (t * co - s) / (t2 * t);
  c.db_over_t = (t * s - T(2) * (T(1) - co)) / (t2 * t2);
  return c;
}

}  // namespace detail

// Axis-angle to rotation matrix.
template <typename T>
Mat3<T> rodrigues(const Vec3<T>& w) {
  const auto c = detail::rodrigues_coeffs<T>(w.squaredNorm());
  const Mat3<T> k = skew<T>(w);
  return Mat3<T>::Identity() + c.a * k + c.b * (k * k);
}

// Partial derivatives dR/dw_i, i = 0..2.
template <typename T>
std::array<Mat3<T>, 3> rodrigues_jacobian(const Vec3<T>& w) {
  const auto c = detail::rodrigues_coeffs<T>(w.squaredNorm());
  const Mat3<T> k = skew<T>(w);
  const Mat3<T> k2 = k * k;
  std::array<Mat3<T>, 3> d;
  for (int i = 0; i < 3; ++i) {
    const Mat3<T> e = skew<T>(Vec3<T>::Unit(i));
    d[i] = c.a * e + c.b * (e * k + k * e) + (c.da_over_t * w[i]) * k +
           (c.db_over_t * w[i]) * k2;
  }
  return d;
}

// Gradient of a scalar L w.r.t. w given dL/dR.
template <typename T>
Vec3<T> rodrigues_vjp(const Vec3<T>& w, const Mat3<T>& grad_r) {
  const auto d = rodrigues_jacobian<T>(w);
  return Vec3<T>(d[0].cwiseProduct(grad_r).sum(), d[1].cwiseProduct(grad_r).sum(),
                 d[2].cwiseProduct(grad_r).sum());
}

// Maps an axis-angle vector to the equivalent one with norm < 2*pi.
template <typename T>
Vec3<T> canonicalize_axis_angle(const Vec3<T>& w) {
  constexpr T two_pi = T(2) * std::numbers::pi_v<T>;
  const T n = w.norm();
  if (n < two_pi) return w;
  const T reduced = std::fmod(n, two_pi);
  return w * (reduced / n);
}

// Rotation matrix to axis-angle (angle in [0, pi]).
template <typename T>
Vec3<T> rotation_to_axis_angle(const Mat3<T>& r) {
  Eigen::AngleAxis<T> aa(r);
  return aa.axis() * aa.angle();
}

}  // namespace flowfit
