#pragma once

#include <cmath>

namespace iac {

inline constexpr double kInvSqrt2 = 0.70710678118654752440;
inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;
inline constexpr double kLn2 = 0.69314718055994530942;

/// Standard normal CDF via erfc (full double accuracy in both tails).
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }

inline double normal_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

inline double gaussian_pdf(double x, double sigma) { return normal_pdf(x / sigma) / sigma; }

inline double gaussian_cdf(double x, double sigma) { return normal_cdf(x / sigma); }

/// Mass of N(0, sigma^2) on [lo, hi]; evaluated on the side that avoids cancellation.
inline double gaussian_interval_mass(double lo, double hi, double sigma) {
  if (lo >= 0) return normal_cdf(-lo / sigma) - normal_cdf(-hi / sigma);
  if (hi <= 0) return normal_cdf(hi / sigma) - normal_cdf(lo / sigma);
  return 1.0 - normal_cdf(lo / sigma) - normal_cdf(-hi / sigma);
}

/// Mass of a unit-width bin whose center sits `offset` away from the mean of N(mean, scale^2).
inline double unit_bin_mass(double offset, double scale) {
  const double a = std::fabs(offset);
  return normal_cdf((0.5 - a) / scale) - normal_cdf((-0.5 - a) / scale);
}

}  // namespace iac
