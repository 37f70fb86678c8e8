#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iac/diff/ops.hpp"
#include "iac/normal.hpp"

namespace iac {

/// Required coverage of the clip interval: at least 1 - 2^-8 of the slab mass.
inline constexpr double kCoverage = 1.0 - 1.0 / 256.0;

/// Smallest odd N whose clip interval [-(N-1)t/2, (N-1)t/2] holds >= 1 - 2^-8 of
/// the slab N(0, sigma^2). Sized from the slab alone; the spike sits in the center bin.
inline int compute_bin_count(double sigma, double bin_width) {
  if (!(sigma > 0) || !(bin_width > 0)) throw std::invalid_argument("compute_bin_count: sigma and t must be positive");
  for (long n = 1;; n += 2) {
    const double half = static_cast<double>(n - 1) / 2.0 * bin_width;
    if (gaussian_interval_mass(-half, half, sigma) >= kCoverage) return static_cast<int>(n);
    if (n > (1L << 30)) throw std::overflow_error("compute_bin_count: sigma/t ratio too large");
  }
}

/// Discretized prior over the quantization grid.
struct PmfTable {
  std::vector<double> centers;     // N grid values, ascending
  std::vector<double> masses;      // renormalized bin masses
  std::vector<double> cumulative;  // N + 1 partial sums of masses, first 0, last 1
  double renorm = 1.0;             // covered mass before renormalization

  std::size_t size() const { return masses.size(); }
  std::size_t center_index() const { return masses.size() / 2; }
  double bits(std::size_t index) const { return -std::log2(masses.at(index)); }

  /// CSV with header: bin_center,mass,bits
  void write_csv(std::ostream& os) const {
    os << "bin_center,mass,bits\n";
    os.precision(17);
    for (std::size_t i = 0; i < size(); ++i) os << centers[i] << ',' << masses[i] << ',' << bits(i) << '\n';
  }
};

/// Spike-and-slab density over parameter updates:
///   p(d) = (N(d | 0, sigma^2) + alpha N(d | 0, (t/6)^2)) / (1 + alpha)
/// together with its pushforward through the t-wide, N-bin quantizer.
class SpikeSlabPrior {
 public:
  SpikeSlabPrior(double sigma, double bin_width, double alpha)
      : sigma_(sigma), t_(bin_width), alpha_(alpha), spike_(bin_width / 6.0) {
    if (!(bin_width > 0)) throw std::invalid_argument("SpikeSlabPrior: bin width must be positive");
    if (!(sigma >= bin_width))
      throw std::invalid_argument("SpikeSlabPrior: slab std-dev " + std::to_string(sigma) +
                                  " must be at least the bin width " + std::to_string(bin_width));
    if (!(alpha >= 0)) throw std::invalid_argument("SpikeSlabPrior: alpha must be non-negative");
    bins_ = compute_bin_count(sigma, bin_width);
    build_pmf();
  }

  double sigma() const { return sigma_; }
  double bin_width() const { return t_; }
  double alpha() const { return alpha_; }
  double spike_sigma() const { return spike_; }
  int bin_count() const { return bins_; }
  int half_bins() const { return (bins_ - 1) / 2; }
  double clip_bound() const { return static_cast<double>(half_bins()) * t_; }
  const PmfTable& pmf() const { return pmf_; }

  double density(double d) const {
    return (gaussian_pdf(d, sigma_) + alpha_ * gaussian_pdf(d, spike_)) / (1.0 + alpha_);
  }

  double density_derivative(double d) const {
    return (-d / (sigma_ * sigma_) * gaussian_pdf(d, sigma_) - alpha_ * d / (spike_ * spike_) * gaussian_pdf(d, spike_)) /
           (1.0 + alpha_);
  }

  double cdf(double d) const { return (gaussian_cdf(d, sigma_) + alpha_ * gaussian_cdf(d, spike_)) / (1.0 + alpha_); }

  /// Unnormalized mixture mass on [lo, hi].
  double interval_mass(double lo, double hi) const {
    return (gaussian_interval_mass(lo, hi, sigma_) + alpha_ * gaussian_interval_mass(lo, hi, spike_)) / (1.0 + alpha_);
  }

  /// log p(d) and d/dd log p(d), evaluated in log space so far tails stay finite.
  void log_density_and_slope(double d, double& logp, double& slope) const {
    const double ls = -0.5 * (d * d) / (sigma_ * sigma_) - std::log(sigma_) + std::log(kInvSqrt2Pi);
    if (alpha_ == 0.0) {
      logp = ls;
      slope = -d / (sigma_ * sigma_);
      return;
    }
    const double lk = std::log(alpha_) - 0.5 * (d * d) / (spike_ * spike_) - std::log(spike_) + std::log(kInvSqrt2Pi);
    const double top = std::max(ls, lk);
    const double ws = std::exp(ls - top), wk = std::exp(lk - top);
    logp = top + std::log(ws + wk) - std::log1p(alpha_);
    slope = (ws * (-d / (sigma_ * sigma_)) + wk * (-d / (spike_ * spike_))) / (ws + wk);
  }

  /// Continuous model rate M = sum -log2 p(d_i), in bits.
  double model_rate_continuous(std::span<const double> deltas) const {
    double bits = 0.0;
    for (double d : deltas) {
      double lp, slope;
      log_density_and_slope(d, lp, slope);
      bits -= lp / kLn2;
    }
    return bits;
  }

  /// dM/dd for a single update, in bits.
  double grad_model_rate_continuous(double d) const {
    double lp, slope;
    log_density_and_slope(d, lp, slope);
    return -slope / kLn2;
  }

  /// Symbol in [0, N) for an on-grid value; throws for off-grid input.
  std::size_t symbol_of(double quantized) const {
    const double k = std::round(quantized / t_);
    if (std::fabs(quantized - k * t_) > 1e-6 * t_ || std::fabs(k) > half_bins())
      throw std::domain_error("update " + std::to_string(quantized) + " is not on the quantization grid (t=" +
                              std::to_string(t_) + ", N=" + std::to_string(bins_) + ")");
    return static_cast<std::size_t>(static_cast<long>(k) + half_bins());
  }

  /// Discrete model rate M-bar = sum -log2 p[d_i] under the renormalized pmf.
  /// Accumulated per symbol so identical updates give an exact multiple.
  double model_rate_discrete(std::span<const double> quantized) const {
    std::vector<std::uint64_t> counts(pmf_.size(), 0);
    for (double q : quantized) ++counts[symbol_of(q)];
    return rate_from_counts(counts);
  }

  double rate_from_counts(std::span<const std::uint64_t> counts) const {
    double bits = 0.0;
    for (std::size_t s = 0; s < counts.size(); ++s)
      if (counts[s]) bits += static_cast<double>(counts[s]) * pmf_.bits(s);
    return bits;
  }

  /// Static cost of the all-zero update, per parameter.
  double zero_update_bits() const { return pmf_.bits(pmf_.center_index()); }

  /// Closed-form straight-through gradient of M-bar at d (bits):
  ///   -(p(q + t/2) - p(q - t/2)) / (P(q + t/2) - P(q - t/2)) / ln 2,  q = Q_t(d).
  double grad_model_rate_discrete(double d) const {
    const double k = std::clamp(std::round(d / t_), -static_cast<double>(half_bins()), static_cast<double>(half_bins()));
    const double q = k * t_;
    const double num = density(q + 0.5 * t_) - density(q - 0.5 * t_);
    const double den = interval_mass(q - 0.5 * t_, q + 0.5 * t_);
    return -num / den / kLn2;
  }

 private:
  void build_pmf() {
    const int h = half_bins();
    const std::size_t n = static_cast<std::size_t>(bins_);
    pmf_.centers.resize(n);
    pmf_.masses.resize(n);
    // Mirror the non-negative half so the table is exactly symmetric.
    for (int k = 0; k <= h; ++k) {
      const double c = static_cast<double>(k) * t_;
      const double m = interval_mass(c - 0.5 * t_, c + 0.5 * t_);
      pmf_.centers[static_cast<std::size_t>(h + k)] = c;
      pmf_.centers[static_cast<std::size_t>(h - k)] = -c;
      pmf_.masses[static_cast<std::size_t>(h + k)] = m;
      pmf_.masses[static_cast<std::size_t>(h - k)] = m;
    }
    double total = 0.0;
    for (int k = h; k >= 1; --k) total += 2.0 * pmf_.masses[static_cast<std::size_t>(h + k)];
    total += pmf_.masses[static_cast<std::size_t>(h)];
    pmf_.renorm = total;
    for (double& m : pmf_.masses) m /= total;
    pmf_.cumulative.assign(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) pmf_.cumulative[i + 1] = pmf_.cumulative[i] + pmf_.masses[i];
    pmf_.cumulative[n] = 1.0;
  }

  double sigma_, t_, alpha_, spike_;
  int bins_ = 1;
  PmfTable pmf_;
};

namespace diff {

/// Continuous model rate M(delta) in bits as a differentiable scalar.
inline Var model_rate_continuous(const Var& delta, const SpikeSlabPrior& prior) {
  double bits = 0.0;
  const Tensor& d = delta.value();
  Tensor slope(d.shape());
  for (std::size_t i = 0; i < d.size(); ++i) {
    double lp, s;
    prior.log_density_and_slope(d[i], lp, s);
    bits -= lp / kLn2;
    slope[i] = -s / kLn2;
  }
  return delta.tape().record(Tensor::scalar(bits), {delta}, [delta, slope = std::move(slope)](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    t.accumulate(delta, [&](Tensor& gd) { for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += g * slope[i]; });
  });
}

}  // namespace diff

}  // namespace iac
