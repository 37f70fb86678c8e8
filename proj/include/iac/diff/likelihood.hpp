#pragma once

#include <algorithm>
#include <cmath>

#include "iac/diff/ops.hpp"
#include "iac/normal.hpp"

namespace iac {

/// Per-bin probability floor used before taking logs (keeps rates finite and
/// matches the entropy coder's minimum frequency of 1 / 2^16).
inline constexpr double kProbFloor = 1.0 / 65536.0;

/// Code length in bits of integer-binned `value` under N(mean, scale^2), unit bins, floored.
inline double discretized_gaussian_bits(double value, double mean, double scale) {
  return -std::log2(std::max(unit_bin_mass(value - mean, scale), kProbFloor));
}

}  // namespace iac

namespace iac::diff {

/// Elementwise -log2 P[v] with P[v] = CDF(v+1/2) - CDF(v-1/2) under N(mean, scale^2).
/// Gradients flow to all three inputs; a floored element contributes none.
inline Var discretized_gaussian_bits(const Var& value, const Var& mean, const Var& scale) {
  detail::require_same_shape("discretized_gaussian_bits", value, mean);
  detail::require_same_shape("discretized_gaussian_bits", value, scale);
  const std::size_t n = value.size();
  Tensor bits(value.shape());
  for (std::size_t i = 0; i < n; ++i)
    bits[i] = iac::discretized_gaussian_bits(value.value()[i], mean.value()[i], scale.value()[i]);
  return value.tape().record(std::move(bits), {value, mean, scale}, [value, mean, scale, n](Tape& t,
                                                                                          std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor &v = t.value(value.id()), &m = t.value(mean.id()), &s = t.value(scale.id());
    Tensor dd(Shape{n}), ds(Shape{n});
    for (std::size_t i = 0; i < n; ++i) {
      const double d = v[i] - m[i], sc = s[i];
      const double p = unit_bin_mass(d, sc);
      if (p <= kProbFloor) continue;
      const double hi = (d + 0.5) / sc, lo = (d - 0.5) / sc;
      const double ph = normal_pdf(hi), pl = normal_pdf(lo);
      const double k = -g[i] / (p * kLn2);
      dd[i] = k * (ph - pl) / sc;
      ds[i] = k * (-(hi * ph - lo * pl) / sc);
    }
    t.accumulate(value, [&](Tensor& gv) { for (std::size_t i = 0; i < n; ++i) gv[i] += dd[i]; });
    t.accumulate(mean, [&](Tensor& gm) { for (std::size_t i = 0; i < n; ++i) gm[i] -= dd[i]; });
    t.accumulate(scale, [&](Tensor& gs) { for (std::size_t i = 0; i < n; ++i) gs[i] += ds[i]; });
  });
}

}  // namespace iac::diff
