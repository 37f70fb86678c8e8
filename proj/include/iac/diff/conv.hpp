#pragma once

#include <Eigen/Core>
#include <memory>
#include <string>
#include <vector>

#include "iac/diff/tape.hpp"

namespace iac::diff {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

struct ConvGeometry {
  std::size_t channels, height, width, kernel, stride, pad, out_h, out_w;

  std::size_t rows() const { return channels * kernel * kernel; }
  std::size_t cols() const { return out_h * out_w; }
};

// image (C,H,W) -> columns (C*K*K, Ho*Wo)
inline void im2col(const double* img, const ConvGeometry& g, double* cols) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * ncols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          double* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            std::fill_n(dst, g.out_w, 0.0);
            continue;
          }
          const double* src = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? 0.0 : src[ix];
          }
        }
      }
}

// Adjoint of im2col: accumulates columns back into the image.
inline void col2im(const double* cols, const ConvGeometry& g, double* img) {
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * ncols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          double* dst = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          const double* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.width)) dst[ix] += src[ox];
          }
        }
      }
}

inline void require(bool ok, const std::string& op, const std::string& what) {
  if (!ok) throw std::invalid_argument(op + ": " + what);
}

}  // namespace detail

/// 2-D cross-correlation. x [N,Cin,H,W], w [Cout,Cin,K,K] -> [N,Cout,Ho,Wo].
inline Var conv2d(const Var& x, const Var& w, std::size_t stride = 1, std::size_t pad = 0) {
  const Shape &xs = x.shape(), &ws = w.shape();
  detail::require(xs.size() == 4 && ws.size() == 4 && ws[1] == xs[1] && ws[2] == ws[3] && stride > 0, "conv2d",
                  "incompatible shapes input " + shape_str(xs) + " weight " + shape_str(ws));
  detail::require(xs[2] + 2 * pad >= ws[2] && xs[3] + 2 * pad >= ws[3], "conv2d",
                  "kernel larger than padded input " + shape_str(xs));
  const std::size_t n = xs[0], cout = ws[0];
  detail::ConvGeometry g{xs[1], xs[2], xs[3], ws[2], stride, pad, 0, 0};
  g.out_h = (g.height + 2 * pad - g.kernel) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kernel) / stride + 1;

  auto cols = std::make_shared<Buffer>(n * g.rows() * g.cols());
  Tensor y(Shape{n, cout, g.out_h, g.out_w});
  detail::CMapMat wm(w.value().data(), static_cast<long>(cout), static_cast<long>(g.rows()));
  const std::size_t in_stride = g.channels * g.height * g.width;
  for (std::size_t b = 0; b < n; ++b) {
    double* cb = cols->data() + b * g.rows() * g.cols();
    detail::im2col(x.value().data() + b * in_stride, g, cb);
    detail::MapMat out(y.data() + b * cout * g.cols(), static_cast<long>(cout), static_cast<long>(g.cols()));
    out.noalias() = wm * detail::CMapMat(cb, static_cast<long>(g.rows()), static_cast<long>(g.cols()));
  }
  return x.tape().record(std::move(y), {x, w}, [x, w, g, n, cout, cols, in_stride](Tape& t, std::size_t self) {
    const Tensor& gy = t.grad(self);
    const long R = static_cast<long>(g.rows()), C = static_cast<long>(g.cols()), O = static_cast<long>(cout);
    t.accumulate(w, [&](Tensor& gw) {
      detail::MapMat gwm(gw.data(), O, R);
      for (std::size_t b = 0; b < n; ++b)
        gwm.noalias() += detail::CMapMat(gy.data() + b * cout * g.cols(), O, C) *
                         detail::CMapMat(cols->data() + b * g.rows() * g.cols(), R, C).transpose();
    });
    t.accumulate(x, [&](Tensor& gx) {
      detail::CMapMat wm(t.value(w.id()).data(), O, R);
      detail::RowMat dcols(R, C);
      for (std::size_t b = 0; b < n; ++b) {
        dcols.noalias() = wm.transpose() * detail::CMapMat(gy.data() + b * cout * g.cols(), O, C);
        detail::col2im(dcols.data(), g, gx.data() + b * in_stride);
      }
    });
  });
}

/// Transposed convolution (adjoint of conv2d with the same geometry).
/// x [N,Cin,H,W], w [Cin,Cout,K,K] -> [N,Cout,(H-1)s-2p+K+op, ...].
inline Var conv_transpose2d(const Var& x, const Var& w, std::size_t stride = 2, std::size_t pad = 0,
                            std::size_t output_pad = 0) {
  const Shape &xs = x.shape(), &ws = w.shape();
  detail::require(xs.size() == 4 && ws.size() == 4 && ws[0] == xs[1] && ws[2] == ws[3] && stride > 0,
                  "conv_transpose2d", "incompatible shapes input " + shape_str(xs) + " weight " + shape_str(ws));
  const std::size_t n = xs[0], cin = xs[1], cout = ws[1], k = ws[2];
  detail::require((xs[2] - 1) * stride + k + output_pad >= 2 * pad, "conv_transpose2d", "padding too large");
  const std::size_t oh = (xs[2] - 1) * stride + k + output_pad - 2 * pad;
  const std::size_t ow = (xs[3] - 1) * stride + k + output_pad - 2 * pad;
  // Geometry of the forward conv that maps the output image back onto the input grid.
  detail::ConvGeometry g{cout, oh, ow, k, stride, pad, xs[2], xs[3]};
  detail::require((oh + 2 * pad - k) / stride + 1 == xs[2] && (ow + 2 * pad - k) / stride + 1 == xs[3],
                  "conv_transpose2d", "output_pad inconsistent with stride for input " + shape_str(xs));

  const long R = static_cast<long>(g.rows()), C = static_cast<long>(g.cols()), I = static_cast<long>(cin);
  Tensor y(Shape{n, cout, oh, ow});
  detail::CMapMat wm(w.value().data(), I, R);
  detail::RowMat cols(R, C);
  const std::size_t out_stride = cout * oh * ow;
  for (std::size_t b = 0; b < n; ++b) {
    cols.noalias() = wm.transpose() * detail::CMapMat(x.value().data() + b * cin * g.cols(), I, C);
    detail::col2im(cols.data(), g, y.data() + b * out_stride);
  }
  return x.tape().record(std::move(y), {x, w}, [x, w, g, n, cin, R, C, I, out_stride](Tape& t, std::size_t self) {
    const Tensor& gy = t.grad(self);
    Buffer dcols(static_cast<std::size_t>(R * C));
    const bool need_w = t.requires_grad(w.id()), need_x = t.requires_grad(x.id());
    for (std::size_t b = 0; b < n; ++b) {
      detail::im2col(gy.data() + b * out_stride, g, dcols.data());
      detail::CMapMat dc(dcols.data(), R, C);
      if (need_w) {
        Tensor& gw = t.grad_buffer(w.id());
        detail::MapMat(gw.data(), I, R).noalias() +=
            detail::CMapMat(t.value(x.id()).data() + b * cin * g.cols(), I, C) * dc.transpose();
      }
      if (need_x) {
        Tensor& gx = t.grad_buffer(x.id());
        detail::MapMat(gx.data() + b * cin * g.cols(), I, C).noalias() +=
            detail::CMapMat(t.value(w.id()).data(), I, R) * dc;
      }
    }
  });
}

/// Adds a per-channel bias [C] to an NCHW tensor.
inline Var bias_add(const Var& x, const Var& b) {
  const Shape& xs = x.shape();
  detail::require(xs.size() == 4 && b.size() == xs[1], "bias_add",
                  "bias " + shape_str(b.shape()) + " does not match input " + shape_str(xs));
  const std::size_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
  Tensor y = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      double* p = y.data() + (i * c + k) * hw;
      const double v = b.value()[k];
      for (std::size_t j = 0; j < hw; ++j) p[j] += v;
    }
  return x.tape().record(std::move(y), {x, b}, [x, b, n, c, hw](Tape& t, std::size_t self) {
    const Tensor& g = t.grad(self);
    t.accumulate(x, [&](Tensor& gx) { for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i]; });
    t.accumulate(b, [&](Tensor& gb) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k) {
          const double* p = g.data() + (i * c + k) * hw;
          double s = 0.0;
          for (std::size_t j = 0; j < hw; ++j) s += p[j];
          gb[k] += s;
        }
    });
  });
}

/// Generalized divisive normalization across channels at every position:
///   y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)      (inverse = false)
///   y_i = x_i * sqrt(beta_i + sum_j gamma_ij x_j^2)      (inverse = true)
/// beta [C] and gamma [C,C] are the effective (already positive) values.
inline Var gdn(const Var& x, const Var& beta, const Var& gamma, bool inverse) {
  const Shape& xs = x.shape();
  detail::require(xs.size() == 4 && beta.size() == xs[1] && gamma.shape() == Shape{xs[1], xs[1]}, "gdn",
                  "input " + shape_str(xs) + " beta " + shape_str(beta.shape()) + " gamma " +
                      shape_str(gamma.shape()));
  const std::size_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
  const long C = static_cast<long>(c), P = static_cast<long>(hw);
  const double e = inverse ? 0.5 : -0.5;

  Tensor y(xs);
  auto norm = std::make_shared<Buffer>(n * c * hw);
  detail::CMapMat gm(gamma.value().data(), C, C);
  Eigen::Map<const Eigen::VectorXd> bv(beta.value().data(), C);
  for (std::size_t b = 0; b < n; ++b) {
    detail::CMapMat xm(x.value().data() + b * c * hw, C, P);
    detail::MapMat nm(norm->data() + b * c * hw, C, P);
    nm.noalias() = gm * xm.cwiseAbs2();
    nm.colwise() += bv;
    detail::MapMat ym(y.data() + b * c * hw, C, P);
    if (inverse)
      ym = xm.cwiseProduct(nm.cwiseSqrt());
    else
      ym = xm.cwiseQuotient(nm.cwiseSqrt());
  }
  return x.tape().record(std::move(y), {x, beta, gamma}, [x, beta, gamma, n, c, hw, C, P, e, norm](Tape& t,
                                                                                                    std::size_t self) {
    const Tensor& gy = t.grad(self);
    detail::CMapMat gm(t.value(gamma.id()).data(), C, C);
    detail::RowMat u(C, P), r(C, P);
    for (std::size_t b = 0; b < n; ++b) {
      detail::CMapMat xm(t.value(x.id()).data() + b * c * hw, C, P);
      detail::CMapMat nm(norm->data() + b * c * hw, C, P);
      detail::CMapMat gym(gy.data() + b * c * hw, C, P);
      r = e > 0 ? nm.cwiseSqrt().eval() : nm.cwiseSqrt().cwiseInverse().eval();  // norm^e
      // u = gy * x * e * norm^(e-1)
      u = (gym.cwiseProduct(xm).cwiseProduct(r).cwiseQuotient(nm) * e).eval();
      t.accumulate(x, [&](Tensor& gx) {
        detail::MapMat gxm(gx.data() + b * c * hw, C, P);
        gxm += gym.cwiseProduct(r);
        gxm += 2.0 * xm.cwiseProduct(gm.transpose() * u);
      });
      t.accumulate(beta, [&](Tensor& gb) { Eigen::Map<Eigen::VectorXd>(gb.data(), C) += u.rowwise().sum(); });
      t.accumulate(gamma, [&](Tensor& gg) {
        detail::MapMat(gg.data(), C, C).noalias() += u * xm.cwiseAbs2().transpose();
      });
    }
  });
}

}  // namespace iac::diff
