#include <gtest/gtest.h>

#include "iac/update_quantizer.hpp"

using namespace iac;

TEST(Quantize, FixedPointAndGradient) {
  QuantGrid g(0.005, 59);
  EXPECT_EQ(g.quantize(0.0), 0.0);
  diff::Tape t;
  auto d = t.leaf(Tensor(Shape{3}, {0.0, 0.3, -1.0}));
  t.backward(diff::sum(diff::quantize_ste(d, g)));
  for (double v : t.grad(d).values()) EXPECT_EQ(v, 1.0);  // identity through rounding and clipping
}

TEST(Quantize, RoundsToNearestBin) {
  QuantGrid g(0.005, 59);
  EXPECT_DOUBLE_EQ(g.quantize(0.0074), 0.005);
  EXPECT_DOUBLE_EQ(g.quantize(-0.0026), -0.005);
}

TEST(Quantize, ClipsToOuterBins) {
  SpikeSlabPrior prior(0.05, 0.005, 1000.0);
  QuantGrid g(prior);
  EXPECT_EQ(g.bins(), 59);
  EXPECT_NEAR(g.quantize(1.0), 0.145, 1e-15);
  EXPECT_NEAR(g.quantize(-1.0), -0.145, 1e-15);
  EXPECT_EQ(g.clip_bound(), prior.clip_bound());
}

TEST(Quantize, RejectsBadGrids) {
  EXPECT_THROW(QuantGrid(0.0, 59), std::invalid_argument);
  EXPECT_THROW(QuantGrid(0.005, 58), std::invalid_argument);
}

TEST(BinIndex, CenterAndEndpoints) {
  QuantGrid g(0.005, 59);
  EXPECT_EQ(g.bin_index(0.0), 29u);
  EXPECT_EQ(g.bin_index(g.quantize(-1.0)), 0u);
  EXPECT_EQ(g.bin_index(g.quantize(1.0)), 58u);
}

TEST(BinIndex, RoundTripsAllSymbols) {
  QuantGrid g(0.005, 59);
  for (std::size_t i = 0; i < 59; ++i) EXPECT_EQ(g.bin_index(g.value_of(i)), i);
}

TEST(BinIndex, RejectsOffGrid) {
  QuantGrid g(0.005, 59);
  EXPECT_THROW(g.bin_index(0.0025), std::domain_error);
  EXPECT_THROW(g.bin_index(0.15), std::domain_error);
  EXPECT_THROW(g.value_of(59), std::out_of_range);
}

TEST(QuantizeProperties, IdempotentBoundedOnGrid) {
  QuantGrid g(0.005, 59);
  Rng rng(17);
  for (int i = 0; i < 100000; ++i) {
    const double d = rng.uniform(-0.3, 0.3);
    const double q = g.quantize(d);
    EXPECT_EQ(g.quantize(q), q);
    EXPECT_TRUE(g.on_grid(q));
    EXPECT_NO_THROW(g.bin_index(q));
    if (std::fabs(d) <= g.clip_bound() + 0.0025) {
      EXPECT_LE(std::fabs(d - q), 0.0025 + 1e-15);
    }
  }
}

TEST(QuantizeProperties, SymmetricTies) {
  QuantGrid g(1.0, 11);
  EXPECT_EQ(g.quantize(0.5), 1.0);
  EXPECT_EQ(g.quantize(-0.5), -1.0);
  EXPECT_EQ(g.quantize(2.5), 3.0);
  EXPECT_EQ(g.quantize(-2.5), -3.0);
}
