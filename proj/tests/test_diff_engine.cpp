#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "iac/diff/conv.hpp"
#include "iac/diff/likelihood.hpp"
#include "iac/diff/ops.hpp"

using namespace iac;
using diff::Tape;
using diff::Var;
using check::check_gradients;
using check::random_tensor;

namespace {

// Dense loops used as the reference for the GEMM-backed kernels.
Tensor naive_conv(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(0), k = w.dim(2);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensor y(Shape{n, co, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = long(i * stride + ky) - long(pad), ix = long(j * stride + kx) - long(pad);
                if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(wd)) continue;
                s += x.at(b, c, std::size_t(iy), std::size_t(ix)) * w[((o * ci + c) * k + ky) * k + kx];
              }
          y.at(b, o, i, j) = s;
        }
  return y;
}

Tensor naive_deconv(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad, std::size_t opad) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(1), k = w.dim(2);
  const std::size_t oh = (h - 1) * stride + k + opad - 2 * pad, ow = (wd - 1) * stride + k + opad - 2 * pad;
  Tensor y(Shape{n, co, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t c = 0; c < ci; ++c)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < wd; ++j)
          for (std::size_t o = 0; o < co; ++o)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long oy = long(i * stride + ky) - long(pad), ox = long(j * stride + kx) - long(pad);
                if (oy < 0 || ox < 0 || oy >= long(oh) || ox >= long(ow)) continue;
                y.at(b, o, std::size_t(oy), std::size_t(ox)) += x.at(b, c, i, j) * w[((c * co + o) * k + ky) * k + kx];
              }
  return y;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(ForwardOps, AllOnesConvolutionSumsTheWindow) {
  Tape t;
  Var x = t.constant(Tensor(Shape{1, 1, 3, 3}, 1.0));
  Var w = t.constant(Tensor(Shape{1, 1, 3, 3}, 1.0));
  Var y = diff::conv2d(x, w, 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.value()[0], 9.0);
}

TEST(ForwardOps, LeakyReluNegativeSlope) {
  Tape t;
  Var y = diff::leaky_relu(t.constant(Tensor::scalar(-1.0)), 0.01);
  EXPECT_DOUBLE_EQ(y.value()[0], -0.01);
}

TEST(ForwardOps, GdnWithUnitBetaAndZeroGammaIsIdentity) {
  Rng rng(3);
  Tape t;
  Tensor xv = random_tensor({2, 4, 3, 5}, rng, -3, 3);
  Var x = t.constant(xv);
  Var beta = t.constant(Tensor(Shape{4}, 1.0));
  Var gamma = t.constant(Tensor(Shape{4, 4}, 0.0));
  EXPECT_EQ(diff::gdn(x, beta, gamma, false).value(), xv);
  EXPECT_EQ(diff::gdn(x, beta, gamma, true).value(), xv);
}

TEST(ForwardOps, ConvolutionMatchesDenseReference) {
  Rng rng(11);
  for (std::size_t stride : {1u, 2u})
    for (std::size_t pad : {0u, 1u, 2u}) {
      Tensor x = random_tensor({2, 3, 9, 8}, rng), w = random_tensor({4, 3, 5, 5}, rng);
      Tape t;
      Var y = diff::conv2d(t.constant(x), t.constant(w), stride, pad);
      EXPECT_LT(max_abs_diff(y.value(), naive_conv(x, w, stride, pad)), 1e-12) << stride << " " << pad;
    }
}

TEST(ForwardOps, TransposedConvolutionMatchesScatterReference) {
  Rng rng(12);
  for (std::size_t pad : {0u, 1u, 2u})
    for (std::size_t opad : {0u, 1u}) {
      Tensor x = random_tensor({2, 3, 4, 5}, rng), w = random_tensor({3, 2, 5, 5}, rng);
      Tape t;
      Var y = diff::conv_transpose2d(t.constant(x), t.constant(w), 2, pad, opad);
      EXPECT_LT(max_abs_diff(y.value(), naive_deconv(x, w, 2, pad, opad)), 1e-12) << pad << " " << opad;
    }
}

TEST(ForwardOps, GdnMatchesDirectFormula) {
  Rng rng(13);
  Tensor x = random_tensor({1, 3, 2, 2}, rng, -2, 2);
  Tensor beta = random_tensor({3}, rng, 0.5, 1.5), gamma = random_tensor({3, 3}, rng, 0.0, 0.3);
  Tape t;
  Var y = diff::gdn(t.constant(x), t.constant(beta), t.constant(gamma), false);
  Var yi = diff::gdn(t.constant(x), t.constant(beta), t.constant(gamma), true);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      for (std::size_t c = 0; c < 3; ++c) {
        double s = beta[c];
        for (std::size_t k = 0; k < 3; ++k) s += gamma[c * 3 + k] * x.at(0, k, i, j) * x.at(0, k, i, j);
        EXPECT_NEAR(y.value().at(0, c, i, j), x.at(0, c, i, j) / std::sqrt(s), 1e-14);
        EXPECT_NEAR(yi.value().at(0, c, i, j), x.at(0, c, i, j) * std::sqrt(s), 1e-14);
      }
}

TEST(ForwardOps, ShapeMismatchNamesOpAndShapes) {
  Tape t;
  Var a = t.constant(Tensor(Shape{2, 3}));
  Var b = t.constant(Tensor(Shape{3, 2}));
  try {
    (void)(a + b);
    FAIL() << "expected failure";
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[3x2]"), std::string::npos);
  }
  Var x = t.constant(Tensor(Shape{1, 2, 5, 5}));
  Var w = t.constant(Tensor(Shape{4, 3, 3, 3}));
  EXPECT_THROW(diff::conv2d(x, w), std::invalid_argument);
}

TEST(Backward, QuadraticGradient) {
  Tape t;
  Var w = t.leaf(Tensor(Shape{3}, {1.0, 2.0, 3.0}));
  t.backward(diff::sum(w * w));
  EXPECT_EQ(t.grad(w), Tensor(Shape{3}, {2.0, 4.0, 6.0}));
}

TEST(Backward, RejectsNonScalarLoss) {
  Tape t;
  Var w = t.leaf(Tensor(Shape{3}, 1.0));
  EXPECT_THROW(t.backward(w * w), std::invalid_argument);
}

TEST(Backward, FanOutAccumulates) {
  Tape t;
  Var x = t.leaf(Tensor(Shape{2}, {0.7, -1.2}));
  // f = exp(x) + x^2, both branches read x.
  t.backward(diff::sum(diff::exp(x) + diff::square(x)));
  EXPECT_NEAR(t.grad(x)[0], std::exp(0.7) + 1.4, 1e-15);
  EXPECT_NEAR(t.grad(x)[1], std::exp(-1.2) - 2.4, 1e-15);
}

TEST(Backward, ReverseSweepVisitsEachNodeOnce) {
  Tape t;
  Var x = t.leaf(Tensor(Shape{4}, 0.5));
  Var a = diff::exp(x);
  Var b = a * x;
  Var c = b + a;
  Var loss = diff::sum(c);
  t.backward(loss);
  EXPECT_EQ(t.last_visited(), 4u);  // exp, mul, add, sum
}

TEST(Backward, RandomTwoLayerNetMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    std::vector<Tensor> in = {random_tensor({1, 2, 6, 6}, rng), random_tensor({3, 2, 3, 3}, rng),
                              random_tensor({3}, rng), random_tensor({2, 3, 3, 3}, rng)};
    auto net = [](Tape&, const std::vector<Var>& v) {
      Var h = diff::leaky_relu(diff::bias_add(diff::conv2d(v[0], v[1], 1, 1), v[2]));
      return diff::conv2d(h, v[3], 2, 1);
    };
    EXPECT_LE(check_gradients(net, in, seed).rel_error, 1e-4) << "seed " << seed;
  }
}

TEST(SteRound, TiesAwayFromZeroAndIdentityGradient) {
  Tape t;
  Var w = t.leaf(Tensor::scalar(0.5));
  Var r = diff::ste_round(w);
  EXPECT_EQ(r.value()[0], 1.0);
  t.backward(diff::scale(r, 2.0));
  EXPECT_EQ(t.grad(w)[0], 2.0);

  Tape t2;
  EXPECT_EQ(diff::ste_round(t2.constant(Tensor::scalar(-0.49))).value()[0], 0.0);
  EXPECT_EQ(diff::ste_round(t2.constant(Tensor::scalar(-0.5))).value()[0], -1.0);
}

TEST(SteRound, GradientAtPointThree) {
  Tape t;
  Var w = t.leaf(Tensor::scalar(0.3));
  t.backward(diff::ste_round(w));
  EXPECT_EQ(t.grad(w)[0], 1.0);
}

TEST(SteRound, CompositeChainRule) {
  Tape t;
  Var x = t.leaf(Tensor::scalar(1.3));
  Var f = diff::ste_round(x) * x;
  EXPECT_DOUBLE_EQ(f.value()[0], 1.3);
  t.backward(f);
  EXPECT_DOUBLE_EQ(t.grad(x)[0], 2.3);
}

TEST(SteRound, IdempotentAndNeverZeroesGradient) {
  Rng rng(5);
  Tape t;
  Var x = t.leaf(random_tensor({1000}, rng, -10, 10));
  Var r1 = diff::ste_round(x);
  Var r2 = diff::ste_round(r1);
  EXPECT_EQ(r1.value(), r2.value());
  t.backward(diff::sum(r2));
  for (double g : t.grad(x).values()) EXPECT_EQ(g, 1.0);
}

TEST(UniformNoise, SupportAndIdentityGradient) {
  Rng rng(7);
  Tape t;
  Tensor xv = random_tensor({10000}, rng);
  Var x = t.leaf(xv);
  Rng noise(99);
  Var y = diff::add_uniform_noise(x, 1.0, noise);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double d = y.value()[i] - xv[i];
    EXPECT_GE(d, -0.5);
    EXPECT_LT(d, 0.5);
  }
  t.backward(diff::sum(y));
  for (double g : t.grad(x).values()) EXPECT_EQ(g, 1.0);
}

TEST(UniformNoise, MeanIsZeroWithinClt) {
  Tape t;
  Var x = t.constant(Tensor(Shape{1000000}));
  Rng noise(2024);
  Var y = diff::add_uniform_noise(x, 1.0, noise);
  double s = 0.0;
  for (double v : y.value().values()) s += v;
  EXPECT_LT(std::fabs(s / 1e6), 3e-3);
}

TEST(UniformNoise, RejectsNonPositiveWidth) {
  Tape t;
  Rng r(1);
  Var x = t.constant(Tensor(Shape{2}));
  EXPECT_THROW(diff::add_uniform_noise(x, 0.0, r), std::invalid_argument);
}

TEST(Determinism, IdenticalSeedsGiveBitwiseIdenticalResults) {
  auto run = [] {
    Rng rng(42);
    Tape t;
    Var x = t.leaf(random_tensor({1, 3, 8, 8}, rng));
    Var w = t.leaf(random_tensor({4, 3, 5, 5}, rng));
    Rng noise(43);
    Var y = diff::add_uniform_noise(diff::conv2d(x, w, 2, 2), 1.0, noise);
    Var loss = diff::sum(diff::square(y));
    t.backward(loss);
    return std::make_pair(loss.value(), t.grad(w));
  };
  EXPECT_EQ(run(), run());
}

// Every differentiable primitive against central differences, 100 seeds each.
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, MatchFiniteDifferences) {
  const auto seed = static_cast<std::uint64_t>(GetParam());
  Rng rng(seed * 7919 + 1);
  struct Case {
    const char* name;
    std::vector<Tensor> inputs;
    check::Builder f;
  };
  const Shape s{2, 3, 4, 4};
  std::vector<Case> cases = {
      {"add", {random_tensor(s, rng), random_tensor(s, rng)}, [](Tape&, auto& v) { return v[0] + v[1]; }},
      {"sub", {random_tensor(s, rng), random_tensor(s, rng)}, [](Tape&, auto& v) { return v[0] - v[1]; }},
      {"mul", {random_tensor(s, rng), random_tensor(s, rng)}, [](Tape&, auto& v) { return v[0] * v[1]; }},
      {"div", {random_tensor(s, rng), random_tensor(s, rng, 0.5, 2.0)}, [](Tape&, auto& v) { return v[0] / v[1]; }},
      {"sqrt", {random_tensor(s, rng, 0.2, 3.0)}, [](Tape&, auto& v) { return diff::sqrt(v[0]); }},
      {"abs", {random_tensor(s, rng)}, [](Tape&, auto& v) { return diff::abs(v[0]); }},
      {"exp", {random_tensor(s, rng)}, [](Tape&, auto& v) { return diff::exp(v[0]); }},
      {"log", {random_tensor(s, rng, 0.2, 3.0)}, [](Tape&, auto& v) { return diff::log(v[0]); }},
      {"square", {random_tensor(s, rng)}, [](Tape&, auto& v) { return diff::square(v[0]); }},
      {"leaky_relu", {random_tensor(s, rng)}, [](Tape&, auto& v) { return diff::leaky_relu(v[0]); }},
      {"softplus", {random_tensor(s, rng, -4, 4)}, [](Tape&, auto& v) { return diff::softplus(v[0]); }},
      {"clamp", {random_tensor(s, rng, -2, 2)}, [](Tape&, auto& v) { return diff::clamp(v[0], -1.0, 1.0); }},
      {"scale", {random_tensor(s, rng)}, [](Tape&, auto& v) { return diff::scale(v[0], -2.5); }},
      {"sum", {random_tensor(s, rng)}, [](Tape&, auto& v) { return diff::sum(v[0]); }},
      {"mean", {random_tensor(s, rng)}, [](Tape&, auto& v) { return diff::mean(v[0]); }},
      {"bias_add", {random_tensor(s, rng), random_tensor({3}, rng)},
       [](Tape&, auto& v) { return diff::bias_add(v[0], v[1]); }},
      {"broadcast_channels", {random_tensor({3}, rng)},
       [s](Tape&, auto& v) { return diff::broadcast_channels(v[0], s); }},
      {"slice_channels", {random_tensor(s, rng)}, [](Tape&, auto& v) { return diff::slice_channels(v[0], 1, 3); }},
      {"crop", {random_tensor(s, rng)}, [](Tape&, auto& v) { return diff::crop(v[0], 3, 2); }},
      {"conv2d_s1", {random_tensor({1, 2, 6, 6}, rng), random_tensor({3, 2, 3, 3}, rng)},
       [](Tape&, auto& v) { return diff::conv2d(v[0], v[1], 1, 1); }},
      {"conv2d_s2", {random_tensor({1, 2, 8, 8}, rng), random_tensor({3, 2, 5, 5}, rng)},
       [](Tape&, auto& v) { return diff::conv2d(v[0], v[1], 2, 2); }},
      {"conv_transpose2d", {random_tensor({1, 2, 3, 3}, rng), random_tensor({2, 3, 5, 5}, rng)},
       [](Tape&, auto& v) { return diff::conv_transpose2d(v[0], v[1], 2, 2, 1); }},
      {"gdn", {random_tensor(s, rng, -2, 2), random_tensor({3}, rng, 0.5, 1.5), random_tensor({3, 3}, rng, 0.0, 0.5)},
       [](Tape&, auto& v) { return diff::gdn(v[0], v[1], v[2], false); }},
      {"igdn", {random_tensor(s, rng, -2, 2), random_tensor({3}, rng, 0.5, 1.5), random_tensor({3, 3}, rng, 0.0, 0.5)},
       [](Tape&, auto& v) { return diff::gdn(v[0], v[1], v[2], true); }},
      {"discretized_gaussian_bits",
       {random_tensor(s, rng, -3, 3), random_tensor(s, rng, -1, 1), random_tensor(s, rng, 0.3, 3.0)},
       [](Tape&, auto& v) { return diff::discretized_gaussian_bits(v[0], v[1], v[2]); }},
  };
  for (const auto& c : cases) {
    const auto r = check_gradients(c.f, c.inputs, seed);
    EXPECT_LE(r.rel_error, 1e-4) << c.name << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradients, ::testing::Range(0, 100));
