#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "iac/diff/tape.hpp"

namespace iac::diff {

namespace detail {

inline void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

// y = f(x); dy/dx = df(x, y)
template <typename F, typename DF>
Var unary(const Var& a, F f, DF df) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return a.tape().record(std::move(y), {a}, [a, df](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor& x = t.value(a.id());
    const Tensor& y = t.value(self);
    t.accumulate(a, [&](Tensor& ga) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
    });
  });
}

}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  detail::require_same_shape("add", a, b);
  Tensor y(a.shape());
  const Tensor &x0 = a.value(), &x1 = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x0[i] + x1[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    t.accumulate(a, [&](Tensor& ga) { for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i]; });
    t.accumulate(b, [&](Tensor& gb) { for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i]; });
  });
}

inline Var operator-(const Var& a, const Var& b) {
  detail::require_same_shape("sub", a, b);
  Tensor y(a.shape());
  const Tensor &x0 = a.value(), &x1 = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x0[i] - x1[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    t.accumulate(a, [&](Tensor& ga) { for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i]; });
    t.accumulate(b, [&](Tensor& gb) { for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i]; });
  });
}

inline Var operator*(const Var& a, const Var& b) {
  detail::require_same_shape("mul", a, b);
  Tensor y(a.shape());
  const Tensor &x0 = a.value(), &x1 = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x0[i] * x1[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor &x0 = t.value(a.id()), &x1 = t.value(b.id());
    t.accumulate(a, [&](Tensor& ga) { for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * x1[i]; });
    t.accumulate(b, [&](Tensor& gb) { for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x0[i]; });
  });
}

inline Var operator/(const Var& a, const Var& b) {
  detail::require_same_shape("div", a, b);
  Tensor y(a.shape());
  const Tensor &x0 = a.value(), &x1 = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x0[i] / x1[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    const Tensor &x1 = t.value(b.id()), &y = t.value(self);
    t.accumulate(a, [&](Tensor& ga) { for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x1[i]; });
    t.accumulate(b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * y[i] / x1[i];
    });
  });
}

inline Var scale(const Var& a, double k) {
  return detail::unary(a, [k](double x) { return k * x; }, [k](double, double) { return k; });
}

inline Var add_scalar(const Var& a, double k) {
  return detail::unary(a, [k](double x) { return x + k; }, [](double, double) { return 1.0; });
}

inline Var sqrt(const Var& a) {
  return detail::unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

inline Var abs(const Var& a) {
  return detail::unary(a, [](double x) { return std::fabs(x); },
                       [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

inline Var exp(const Var& a) {
  return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
  return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var square(const Var& a) {
  return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var leaky_relu(const Var& a, double slope = 0.01) {
  return detail::unary(a, [slope](double x) { return x >= 0 ? x : slope * x; },
                       [slope](double x, double) { return x >= 0 ? 1.0 : slope; });
}

inline double softplus_value(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

inline double inverse_softplus(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

inline Var softplus(const Var& a) {
  return detail::unary(a, softplus_value, [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

/// Gradient passes only where the input lies inside [lo, hi].
inline Var clamp(const Var& a, double lo, double hi) {
  return detail::unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
                       [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

/// Round half away from zero forward, identity backward.
inline Var ste_round(const Var& a) {
  return detail::unary(a, [](double x) { return std::round(x); }, [](double, double) { return 1.0; });
}

/// Adds i.i.d. Uniform(-width/2, width/2); identity backward.
inline Var add_uniform_noise(const Var& a, double width, Rng& rng) {
  if (!(width > 0)) throw std::invalid_argument("add_uniform_noise: width must be positive");
  Tensor y = a.value();
  for (double& v : y.values()) v += width * (rng.uniform() - 0.5);
  return a.tape().record(std::move(y), {a}, [a](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    t.accumulate(a, [&](Tensor& ga) { for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i]; });
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape().record(Tensor::scalar(s), {a}, [a](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    t.accumulate(a, [&](Tensor& ga) { for (double& v : ga.values()) v += g; });
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Var add_scalars(const Var& a, const Var& b) {
  if (a.size() != 1 || b.size() != 1)
    throw std::invalid_argument("add_scalars: operands must be scalar");
  return a.tape().record(Tensor::scalar(a.value()[0] + b.value()[0]), {a, b}, [a, b](Tape& t, std::size_t self) {
    const double g = t.grad(self)[0];
    t.accumulate(a, [&](Tensor& ga) { ga[0] += g; });
    t.accumulate(b, [&](Tensor& gb) { gb[0] += g; });
  });
}

/// Broadcasts a per-channel vector [C] to an NCHW shape.
inline Var broadcast_channels(const Var& p, const Shape& nchw) {
  if (nchw.size() != 4 || p.size() != nchw[1])
    throw std::invalid_argument("broadcast_channels: " + shape_str(p.shape()) + " cannot fill " + shape_str(nchw));
  Tensor y(nchw);
  const std::size_t n = nchw[0], c = nchw[1], hw = nchw[2] * nchw[3];
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < c; ++k)
      std::fill_n(y.data() + (b * c + k) * hw, hw, p.value()[k]);
  return p.tape().record(std::move(y), {p}, [p, n, c, hw](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    t.accumulate(p, [&](Tensor& gp) {
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t k = 0; k < c; ++k) {
          double s = 0.0;
          const double* row = g.data() + (b * c + k) * hw;
          for (std::size_t i = 0; i < hw; ++i) s += row[i];
          gp[k] += s;
        }
    });
  });
}

/// Channels [begin, end) of an NCHW tensor.
inline Var slice_channels(const Var& a, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  if (s.size() != 4 || begin >= end || end > s[1])
    throw std::invalid_argument("slice_channels: bad range for " + shape_str(s));
  const std::size_t n = s[0], c = s[1], hw = s[2] * s[3], k = end - begin;
  Tensor y(Shape{n, k, s[2], s[3]});
  for (std::size_t b = 0; b < n; ++b)
    std::copy_n(a.value().data() + (b * c + begin) * hw, k * hw, y.data() + b * k * hw);
  return a.tape().record(std::move(y), {a}, [a, n, c, hw, k, begin](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    t.accumulate(a, [&](Tensor& ga) {
      for (std::size_t b = 0; b < n; ++b) {
        const double* src = g.data() + b * k * hw;
        double* dst = ga.data() + (b * c + begin) * hw;
        for (std::size_t i = 0; i < k * hw; ++i) dst[i] += src[i];
      }
    });
  });
}

/// Top-left spatial crop of an NCHW tensor.
inline Var crop(const Var& a, std::size_t height, std::size_t width) {
  const Shape& s = a.shape();
  if (s.size() != 4 || height > s[2] || width > s[3])
    throw std::invalid_argument("crop: " + std::to_string(height) + "x" + std::to_string(width) +
                                " exceeds " + shape_str(s));
  if (height == s[2] && width == s[3]) return a;
  const std::size_t nc = s[0] * s[1], H = s[2], W = s[3];
  Tensor y(Shape{s[0], s[1], height, width});
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t i = 0; i < height; ++i)
      std::copy_n(a.value().data() + (p * H + i) * W, width, y.data() + (p * height + i) * width);
  return a.tape().record(std::move(y), {a}, [a, nc, H, W, height, width](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    t.accumulate(a, [&](Tensor& ga) {
      for (std::size_t p = 0; p < nc; ++p)
        for (std::size_t i = 0; i < height; ++i)
          for (std::size_t j = 0; j < width; ++j) ga[(p * H + i) * W + j] += g[(p * height + i) * width + j];
    });
  });
}

}  // namespace iac::diff
