#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iac/normal.hpp"

namespace iac {

inline constexpr unsigned kDefaultPrecision = 16;

/// Integer symbol frequencies summing to exactly 2^precision, every symbol >= 1.
class FrequencyTable {
 public:
  FrequencyTable() = default;

  FrequencyTable(std::vector<std::uint32_t> freq, unsigned precision) : freq_(std::move(freq)), precision_(precision) {
    if (precision == 0 || precision > 24) throw std::invalid_argument("FrequencyTable: precision must be in [1, 24]");
    cum_.assign(freq_.size() + 1, 0);
    for (std::size_t i = 0; i < freq_.size(); ++i) {
      if (freq_[i] == 0) throw std::invalid_argument("FrequencyTable: zero frequency for symbol " + std::to_string(i));
      cum_[i + 1] = cum_[i] + freq_[i];
    }
    if (cum_.back() != total())
      throw std::invalid_argument("FrequencyTable: frequencies sum to " + std::to_string(cum_.back()) + ", expected " +
                                  std::to_string(total()));
  }

  std::size_t size() const { return freq_.size(); }
  unsigned precision() const { return precision_; }
  std::uint32_t total() const { return std::uint32_t{1} << precision_; }
  std::uint32_t freq(std::size_t s) const { return freq_[s]; }
  std::uint32_t cum(std::size_t s) const { return cum_[s]; }
  const std::vector<std::uint32_t>& frequencies() const { return freq_; }

  double probability(std::size_t s) const { return static_cast<double>(freq_[s]) / total(); }
  double bits(std::size_t s) const { return static_cast<double>(precision_) - std::log2(static_cast<double>(freq_[s])); }

  /// Symbol whose cumulative interval contains `value` (< total()).
  std::size_t lookup(std::uint32_t value) const {
    auto it = std::upper_bound(cum_.begin(), cum_.end(), value);
    return static_cast<std::size_t>(std::distance(cum_.begin(), it)) - 1;
  }

 private:
  std::vector<std::uint32_t> freq_;
  std::vector<std::uint32_t> cum_;
  unsigned precision_ = kDefaultPrecision;
};

/// Largest-remainder rounding of `masses` (summing to 1) onto 2^precision; any symbol
/// left at zero is raised to 1 and the deficit is taken from the current largest bin.
inline FrequencyTable freq_from_pmf(std::span<const double> masses, unsigned precision = kDefaultPrecision) {
  const std::uint64_t total = std::uint64_t{1} << precision;
  if (masses.empty()) throw std::invalid_argument("freq_from_pmf: empty pmf");
  if (masses.size() > total)
    throw std::invalid_argument("freq_from_pmf: " + std::to_string(masses.size()) + " symbols exceed 2^" +
                                std::to_string(precision));
  double sum = 0.0;
  for (double m : masses) {
    if (!(m >= 0)) throw std::invalid_argument("freq_from_pmf: negative or NaN mass");
    sum += m;
  }
  if (std::fabs(sum - 1.0) > 1e-9) throw std::invalid_argument("freq_from_pmf: masses sum to " + std::to_string(sum));

  const std::size_t n = masses.size();
  std::vector<std::uint32_t> freq(n);
  std::vector<double> rem(n);
  std::uint64_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double scaled = masses[i] * static_cast<double>(total);
    const double fl = std::floor(scaled);
    freq[i] = static_cast<std::uint32_t>(fl);
    rem[i] = scaled - fl;
    assigned += freq[i];
  }
  if (assigned < total) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
    for (std::size_t k = 0; assigned < total; k = (k + 1) % n, ++assigned) ++freq[order[k]];
  } else {
    // Only reachable through rounding noise in `sum`; trim from the largest bins.
    while (assigned > total) {
      --*std::max_element(freq.begin(), freq.end());
      --assigned;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (freq[i] != 0) continue;
    auto largest = std::max_element(freq.begin(), freq.end());
    --*largest;
    freq[i] = 1;
  }
  return FrequencyTable(std::move(freq), precision);
}

namespace detail {
inline constexpr std::uint64_t kWindow = std::uint64_t{1} << 56;  // coder interval resolution
inline constexpr std::uint64_t kBottom = std::uint64_t{1} << 48;  // renormalize below this
inline constexpr std::uint64_t kMask = kWindow - 1;
}  // namespace detail

/// Byte-oriented range coder with a 56-bit interval and carry propagation.
/// The decoder reads zeros past the end of its input, which lets the encoder
/// drop trailing zero bytes at flush.
class RangeEncoder {
 public:
  void encode(const FrequencyTable& table, std::size_t symbol) {
    if (symbol >= table.size())
      throw std::out_of_range("RangeEncoder: symbol " + std::to_string(symbol) + " outside table of " +
                              std::to_string(table.size()));
    const std::uint64_t r = range_ >> table.precision();
    low_ += r * table.cum(symbol);
    range_ = r * table.freq(symbol);
    while (range_ < detail::kBottom) {
      range_ <<= 8;
      shift_low();
    }
    ++count_;
  }

  std::size_t symbols() const { return count_; }

  /// Terminates the stream and returns the payload.
  std::vector<std::uint8_t> finish() {
    // Pick the value in [low, low + range) with the most trailing zero bits.
    const std::uint64_t end = low_ + range_;
    for (int k = 56; k >= 0; --k) {
      const std::uint64_t step = std::uint64_t{1} << k;
      const std::uint64_t v = (low_ + step - 1) & ~(step - 1);
      if (v >= low_ && v < end) {
        low_ = v;
        break;
      }
    }
    for (int i = 0; i < 8; ++i) shift_low();
    while (!out_.empty() && out_.back() == 0) out_.pop_back();
    return std::move(out_);
  }

 private:
  void shift_low() {
    const std::uint64_t top = low_ >> 48;  // 8 output bits plus the carry
    if (top != 0xFF) {
      const auto carry = static_cast<std::uint8_t>(top >> 8);
      if (has_cache_) out_.push_back(static_cast<std::uint8_t>(cache_ + carry));
      for (; pending_ > 0; --pending_) out_.push_back(static_cast<std::uint8_t>(0xFF + carry));
      cache_ = static_cast<std::uint8_t>(top & 0xFF);
      has_cache_ = true;
    } else {
      ++pending_;
    }
    low_ = (low_ << 8) & detail::kMask;
  }

  std::uint64_t low_ = 0;
  std::uint64_t range_ = detail::kMask;
  std::uint8_t cache_ = 0;
  bool has_cache_ = false;
  std::uint64_t pending_ = 0;
  std::size_t count_ = 0;
  std::vector<std::uint8_t> out_;
};

class RangeDecoder {
 public:
  explicit RangeDecoder(std::span<const std::uint8_t> data) : data_(data) {
    for (int i = 0; i < 7; ++i) code_ = (code_ << 8) | next_byte();
  }

  std::size_t decode(const FrequencyTable& table) {
    const std::uint64_t r = range_ >> table.precision();
    const std::uint64_t v = std::min<std::uint64_t>(code_ / r, table.total() - 1);
    const std::size_t s = table.lookup(static_cast<std::uint32_t>(v));
    code_ -= r * table.cum(s);
    range_ = r * table.freq(s);
    while (range_ < detail::kBottom) {
      code_ = ((code_ << 8) | next_byte()) & detail::kMask;
      range_ <<= 8;
    }
    return s;
  }

  /// Bytes read from the real input (virtual zero padding excluded).
  std::size_t consumed() const { return std::min(pos_, data_.size()); }

 private:
  std::uint64_t next_byte() {
    const std::uint64_t b = pos_ < data_.size() ? data_[pos_] : 0;
    ++pos_;
    return b;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::uint64_t code_ = 0;
  std::uint64_t range_ = detail::kMask;
};

/// Table source for position i of a symbol sequence.
using TableFor = std::function<const FrequencyTable&(std::size_t)>;

inline std::vector<std::uint8_t> encode_symbols(std::span<const std::size_t> symbols, const TableFor& table_for) {
  RangeEncoder enc;
  for (std::size_t i = 0; i < symbols.size(); ++i) enc.encode(table_for(i), symbols[i]);
  return enc.finish();
}

inline std::vector<std::size_t> decode_symbols(std::span<const std::uint8_t> bytes, std::size_t count,
                                               const TableFor& table_for) {
  RangeDecoder dec(bytes);
  std::vector<std::size_t> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = dec.decode(table_for(i));
  return out;
}

/// Ideal code length of a sequence under its tables, in bits.
inline double table_cross_entropy(std::span<const std::size_t> symbols, const TableFor& table_for) {
  double bits = 0.0;
  for (std::size_t i = 0; i < symbols.size(); ++i) bits += table_for(i).bits(symbols[i]);
  return bits;
}

/// Frequency table over the integers [lowest, highest] for one latent element, plus a
/// final escape symbol for values outside that range.
struct LatentTable {
  long lowest = 0;
  FrequencyTable table;

  long highest() const { return lowest + static_cast<long>(table.size()) - 2; }
  std::size_t escape() const { return table.size() - 1; }
  bool in_support(long value) const { return value >= lowest && value <= highest(); }

  /// Symbol for an integer latent; the escape symbol outside the support.
  std::size_t symbol(long value) const {
    return in_support(value) ? static_cast<std::size_t>(value - lowest) : escape();
  }
  long value(std::size_t symbol) const { return lowest + static_cast<long>(symbol); }
};

inline constexpr long kLatentMinHalfWidth = 16;
inline constexpr long kLatentMaxHalfWidth = 4096;

/// Unit-bin masses of N(mean, scale^2) over the integers round(mean) +- max(16, 8 scale),
/// followed by the tail mass outside that range (the escape symbol).
struct LatentSupport {
  long lowest = 0;
  std::vector<double> masses;
};

inline LatentSupport latent_support(double mean, double scale) {
  if (!(scale > 0)) throw std::invalid_argument("latent_support: scale must be positive");
  if (!std::isfinite(mean)) throw std::invalid_argument("latent_support: mean must be finite");
  const long center = static_cast<long>(std::round(mean));
  const long half = std::clamp(static_cast<long>(std::ceil(8.0 * scale)), kLatentMinHalfWidth, kLatentMaxHalfWidth);
  LatentSupport out{center - half, std::vector<double>(static_cast<std::size_t>(2 * half + 2))};
  double sum = 0.0;
  for (std::size_t i = 0; i + 1 < out.masses.size(); ++i) {
    const double v = static_cast<double>(out.lowest + static_cast<long>(i));
    out.masses[i] = unit_bin_mass(v - mean, scale);
    sum += out.masses[i];
  }
  out.masses.back() = std::max(0.0, 1.0 - sum);
  sum += out.masses.back();
  for (double& m : out.masses) m /= sum;
  return out;
}

inline LatentTable latent_table(double mean, double scale, unsigned precision = kDefaultPrecision) {
  LatentSupport s = latent_support(mean, scale);
  return LatentTable{s.lowest, freq_from_pmf(s.masses, precision)};
}

namespace detail {
inline const FrequencyTable& uniform16() {
  static const FrequencyTable t(std::vector<std::uint32_t>(65536, 1), 16);
  return t;
}
}  // namespace detail

inline constexpr long kLatentLimit = (1L << 31) - 1;

/// Codes one integer latent; escaped values follow as 32 raw bits (zigzag).
inline void encode_latent(RangeEncoder& enc, const LatentTable& t, long value) {
  const std::size_t s = t.symbol(value);
  enc.encode(t.table, s);
  if (s != t.escape()) return;
  if (value > kLatentLimit || value < -kLatentLimit)
    throw std::out_of_range("encode_latent: latent " + std::to_string(value) + " exceeds the 32-bit escape range");
  const std::uint32_t z = value >= 0 ? static_cast<std::uint32_t>(value) << 1 : (static_cast<std::uint32_t>(-value) << 1) - 1;
  enc.encode(detail::uniform16(), z >> 16);
  enc.encode(detail::uniform16(), z & 0xFFFF);
}

inline long decode_latent(RangeDecoder& dec, const LatentTable& t) {
  const std::size_t s = dec.decode(t.table);
  if (s != t.escape()) return t.value(s);
  const std::uint32_t z = static_cast<std::uint32_t>(dec.decode(detail::uniform16()) << 16) |
                          static_cast<std::uint32_t>(dec.decode(detail::uniform16()));
  return (z & 1) ? -static_cast<long>((z + 1) >> 1) : static_cast<long>(z >> 1);
}

}  // namespace iac
