#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iac/diff/ops.hpp"
#include "iac/update_prior.hpp"

namespace iac {

/// Clipped uniform quantizer Q_t with N (odd) bins centered on multiples of t.
/// Grid values are always produced as k * t, so encoder and decoder agree bitwise.
class QuantGrid {
 public:
  QuantGrid(double bin_width, int bins) : t_(bin_width), n_(bins) {
    if (!(bin_width > 0)) throw std::invalid_argument("QuantGrid: bin width must be positive");
    if (bins < 1 || bins % 2 == 0) throw std::invalid_argument("QuantGrid: bin count must be odd and positive");
  }

  explicit QuantGrid(const SpikeSlabPrior& prior) : QuantGrid(prior.bin_width(), prior.bin_count()) {}

  double bin_width() const { return t_; }
  int bins() const { return n_; }
  int half_bins() const { return (n_ - 1) / 2; }
  double clip_bound() const { return static_cast<double>(half_bins()) * t_; }

  long level(double d) const {
    const double k = std::round(d / t_);
    const double h = static_cast<double>(half_bins());
    return static_cast<long>(std::clamp(k, -h, h));
  }

  double quantize(double d) const { return static_cast<double>(level(d)) * t_; }

  void quantize(std::span<const double> in, std::span<double> out) const {
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = quantize(in[i]);
  }

  std::vector<double> quantize(std::span<const double> in) const {
    std::vector<double> out(in.size());
    quantize(in, out);
    return out;
  }

  bool on_grid(double q) const {
    const double k = std::round(q / t_);
    return std::fabs(k) <= half_bins() && q == k * t_;
  }

  /// Entropy-coder symbol: round(q / t) + (N - 1) / 2. Throws when q is off-grid.
  std::size_t bin_index(double q) const {
    if (!on_grid(q))
      throw std::domain_error("bin_index: " + std::to_string(q) + " is not a grid value (t=" + std::to_string(t_) +
                              ", N=" + std::to_string(n_) + ")");
    return static_cast<std::size_t>(static_cast<long>(std::round(q / t_)) + half_bins());
  }

  double value_of(std::size_t index) const {
    if (index >= static_cast<std::size_t>(n_)) throw std::out_of_range("value_of: symbol out of range");
    return static_cast<double>(static_cast<long>(index) - half_bins()) * t_;
  }

 private:
  double t_;
  int n_;
};

namespace diff {

/// Q_t forward; identity backward through both the rounding and the clip.
inline Var quantize_ste(const Var& delta, const QuantGrid& grid) {
  return detail::unary(delta, [grid](double d) { return grid.quantize(d); }, [](double, double) { return 1.0; });
}

}  // namespace diff

}  // namespace iac
