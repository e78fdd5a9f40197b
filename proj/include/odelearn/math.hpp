// Scalar helpers shared by models and networks. Templated so the same code
// runs on double and on autodiff Vars.
#pragma once

#include <cmath>
#include <numbers>

#include "odelearn/autodiff.hpp"

namespace odelearn {

// Smoothing scale of smooth_sqrt.
inline constexpr double kSqrtEps = 1e-6;

// x / (x^2 + eps^2)^(1/4): equals sqrt(x) for x >> eps, vanishes at 0 with a
// finite slope and stays odd below zero.
template <class T>
T smooth_sqrt(const T& x) {
  using std::sqrt;
  return x / sqrt(sqrt(x * x + kSqrtEps * kSqrtEps));
}

// Wrap an angle to (-pi, pi]. The integer shift is treated as a constant.
template <class T>
T wrap_angle(const T& theta) {
  const double v = ad::value_of(theta);
  const double k = std::round(v / (2.0 * std::numbers::pi));
  T r = theta - 2.0 * std::numbers::pi * k;
  if (ad::value_of(r) <= -std::numbers::pi) r = r + 2.0 * std::numbers::pi;
  return r;
}

template <class T>
T clamp_value(const T& x, double lo, double hi) {
  const double v = ad::value_of(x);
  if (v < lo) return T(lo);
  if (v > hi) return T(hi);
  return x;
}

}  // namespace odelearn
