#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "gradcheck.hpp"
#include "iac/codec_model.hpp"

using namespace iac;
using diff::Tape;
using diff::Var;

namespace {

Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed, std::size_t n = 1) {
  Rng rng(seed);
  Tensor x(Shape{n, 3, h, w});
  for (double& v : x.values()) v = rng.uniform();
  return x;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.channels = 4;
  c.latent_channels = 4;
  c.hyper_channels = 4;
  c.hyper_latent_channels = 2;
  return c;
}

}  // namespace

TEST(CodecModel, LatentShapes) {
  const auto m = CodecModel::create(ModelConfig{}, 1);
  Tape tape;
  const auto tx = codec::bind(tape, m.transmitter(), false);
  const auto z = codec::encode_latents(tx, tape.constant(random_image(64, 64, 2)), codec::LatentMode::deterministic);
  EXPECT_EQ(z.z2.shape(), (Shape{1, 32, 8, 8}));
  EXPECT_EQ(z.z1.shape(), (Shape{1, 16, 2, 2}));
}

TEST(CodecModel, RoundedLatentsAreIntegral) {
  const auto m = CodecModel::create(ModelConfig{}, 1);
  Tape tape;
  const auto tx = codec::bind(tape, m.transmitter(), false);
  const auto z = codec::encode_latents(tx, tape.constant(random_image(64, 32, 3)), codec::LatentMode::rounded);
  for (const Var* v : {&z.z1, &z.z2})
    for (double e : v->value().values()) EXPECT_EQ(e, std::round(e));
}

TEST(CodecModel, NoiseStaysWithinHalfUnit) {
  const auto m = CodecModel::create(ModelConfig{}, 1);
  Tape tape;
  const auto tx = codec::bind(tape, m.transmitter(), false);
  const Var x = tape.constant(random_image(32, 32, 4));
  Rng rng(9);
  const auto noisy = codec::encode_latents(tx, x, codec::LatentMode::noisy, &rng);
  const auto raw = codec::encode_latents(tx, x, codec::LatentMode::deterministic);
  for (std::size_t i = 0; i < raw.z2.size(); ++i) EXPECT_LT(std::fabs(noisy.z2.value()[i] - raw.z2.value()[i]), 0.5);
  for (std::size_t i = 0; i < raw.z1.size(); ++i) EXPECT_LT(std::fabs(noisy.z1.value()[i] - raw.z1.value()[i]), 0.5);
  EXPECT_THROW(codec::encode_latents(tx, x, codec::LatentMode::noisy), std::invalid_argument);
}

TEST(CodecModel, NonDivisibleInputAsksForPadding) {
  const auto m = CodecModel::create(ModelConfig{}, 1);
  Tape tape;
  const auto tx = codec::bind(tape, m.transmitter(), false);
  try {
    codec::encode_latents(tx, tape.constant(random_image(40, 64, 5)), codec::LatentMode::rounded);
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("pad"), std::string::npos);
  }
}

TEST(CodecModel, ReplicatePadding) {
  Tensor x(Shape{1, 1, 2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const Tensor y = pad_replicate(x, 4);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  EXPECT_EQ(y.at(0, 0, 0, 3), 3.0);
  EXPECT_EQ(y.at(0, 0, 3, 0), 4.0);
  EXPECT_EQ(y.at(0, 0, 3, 3), 6.0);
  EXPECT_EQ(pad_replicate(y, 4), y);
}

namespace {

// Receiver parameters that make z1 = 0 and z2 have mean 0 / scale 1 everywhere.
ParameterList unit_prior_receiver() {
  auto m = CodecModel::create(ModelConfig{}, 1);
  auto rx = m.receiver();
  rx[kPriorScale].value = Tensor(rx[kPriorScale].value.shape(), diff::inverse_softplus(1.0));
  for (auto slot : {kHdec0W, kHdec0B, kHdec1W}) rx[slot].value = Tensor(rx[slot].value.shape());
  Tensor b(rx[kHdec1B].value.shape());
  for (std::size_t i = 32; i < 64; ++i) b[i] = diff::inverse_softplus(1.0);
  rx[kHdec1B].value = b;
  return rx;
}

}  // namespace

TEST(LatentRate, SingleElementUnitGaussian) {
  Tape tape;
  const Var v = tape.constant(Tensor(Shape{1}, 0.0));
  const Var mean = tape.constant(Tensor(Shape{1}, 0.0));
  const Var scale = tape.constant(Tensor(Shape{1}, 1.0));
  // -log2(2 Phi(0.5) - 1), scipy.stats.norm
  EXPECT_NEAR(diff::discretized_gaussian_bits(v, mean, scale).value()[0], 1.3848665342909896, 1e-12);
}

TEST(LatentRate, FullPathUnderUnitPriors) {
  const auto rx_params = unit_prior_receiver();
  Tape tape;
  const auto rx = codec::bind(tape, rx_params, false);
  const Var z1 = tape.constant(Tensor(Shape{1, 16, 1, 1}));
  const Var z2 = tape.constant(Tensor(Shape{1, 32, 4, 4}));
  const auto r = codec::latent_rate(rx, {z1, z2});
  EXPECT_NEAR(r.z1_bits.value()[0], 16 * 1.3848665342909896, 1e-9);
  EXPECT_NEAR(r.z2_bits.value()[0], 512 * 1.3848665342909896, 1e-9);
}

TEST(LatentRate, TailMassIsFloored) {
  Tape tape;
  const Var v = tape.constant(Tensor(Shape{1}, 50.0));
  const Var mean = tape.constant(Tensor(Shape{1}, 0.0));
  const Var scale = tape.constant(Tensor(Shape{1}, kScaleFloor));
  const double bits = diff::discretized_gaussian_bits(v, mean, scale).value()[0];
  EXPECT_TRUE(std::isfinite(bits));
  EXPECT_NEAR(bits, 16.0, 1e-9);
}

TEST(LatentRate, GrowsWithScaleAtZero) {
  double prev = -1.0;
  for (double s : {0.5, 1.0, 4.0, 16.0, 64.0}) {
    const double b = iac::discretized_gaussian_bits(0.0, 0.0, s);
    EXPECT_GT(b, prev);
    prev = b;
  }
}

TEST(LatentRate, NonNegativeForRandomModelsAndImages) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto m = CodecModel::create(ModelConfig{}, seed);
    Tape tape;
    const auto tx = codec::bind(tape, m.transmitter(), false);
    const auto rx = codec::bind(tape, m.receiver(), false);
    Rng rng(seed);
    const auto z = codec::encode_latents(tx, tape.constant(random_image(32, 64, seed + 10)), codec::LatentMode::noisy, &rng);
    const auto r = codec::latent_rate(rx, z);
    EXPECT_GE(r.z1_bits.value()[0], 0.0);
    EXPECT_GE(r.z2_bits.value()[0], 0.0);
  }
}

TEST(Reconstruct, ZeroWeightsGiveBiasImage) {
  auto m = CodecModel::create(ModelConfig{}, 3);
  auto& rx = m.receiver();
  for (auto slot : {kDec0W, kDec1W, kDec2W, kDec0B, kDec1B}) rx[slot].value = Tensor(rx[slot].value.shape());
  rx[kDec2B].value = Tensor(Shape{3}, std::vector<double>{0.25, -0.5, 1.5});
  Tape tape;
  const auto rxv = codec::bind(tape, rx, false);
  Rng rng(4);
  const Var z2 = tape.constant(check::random_tensor(Shape{1, 32, 4, 4}, rng, -3, 3));
  const Tensor& y = codec::reconstruct(rxv, diff::ste_round(z2)).value();
  ASSERT_EQ(y.shape(), (Shape{1, 3, 32, 32}));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 32; ++i)
      for (std::size_t j = 0; j < 32; ++j) EXPECT_EQ(y.at(0, c, i, j), rx[kDec2B].value[c]);
}

TEST(Reconstruct, Deterministic) {
  const auto m = CodecModel::create(ModelConfig{}, 5);
  auto run = [&] {
    Tape tape;
    const auto tx = codec::bind(tape, m.transmitter(), false);
    const auto rx = codec::bind(tape, m.receiver(), false);
    const auto z = codec::encode_latents(tx, tape.constant(random_image(64, 64, 6)), codec::LatentMode::rounded);
    return codec::reconstruct(rx, z.z2).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(Reconstruct, UsesOnlyReceiverParameters) {
  const auto m = CodecModel::create(ModelConfig{}, 5);
  Tape tape;
  const auto tx = codec::bind(tape, m.transmitter(), true);
  const auto rx = codec::bind(tape, m.receiver(), true);
  const auto z = codec::encode_latents(tx, tape.constant(random_image(32, 32, 6)), codec::LatentMode::rounded);
  // Decode path starts from the integral values, detached from the encoder.
  const Var z2 = tape.constant(z.z2.value());
  const Var z1 = tape.constant(z.z1.value());
  const Var loss = diff::add_scalars(diff::sum(codec::reconstruct(rx, z2)), codec::latent_rate(rx, {z1, z2}).total);
  tape.backward(loss);
  for (const auto& v : tx)
    for (double g : tape.grad(v).values()) ASSERT_EQ(g, 0.0);
  double rx_norm = 0.0;
  for (const auto& v : rx)
    for (double g : tape.grad(v).values()) rx_norm += g * g;
  EXPECT_GT(rx_norm, 0.0);
}

TEST(CodecModel, ParameterPartition) {
  const auto m = CodecModel::create(ModelConfig{}, 0);
  std::set<std::string> tx, rx;
  for (const auto& p : m.transmitter()) tx.insert(p.name);
  for (const auto& p : m.receiver()) rx.insert(p.name);
  EXPECT_EQ(tx.size(), m.transmitter().size());
  EXPECT_EQ(rx.size(), m.receiver().size());
  for (const auto& n : tx) EXPECT_EQ(rx.count(n), 0u) << n;
  for (const auto& p : m.transmitter())
    EXPECT_TRUE(p.group == ParamGroup::encoder || p.group == ParamGroup::hyper_encoder) << p.name;
  for (const auto& p : m.receiver())
    EXPECT_FALSE(p.group == ParamGroup::encoder || p.group == ParamGroup::hyper_encoder) << p.name;
  EXPECT_EQ(m.receiver().size(), static_cast<std::size_t>(kRxSlots));
  EXPECT_EQ(m.transmitter().size(), static_cast<std::size_t>(kTxSlots));
}

TEST(CodecModel, ReceiverParameterCount) {
  // hyperprior 2*16; hyper-decoder 16*32*25+32 + 32*64*25+64; decoder 3 deconvs + 2 IGDN
  const std::size_t expected = 32 + (12800 + 32) + (51200 + 64) + (25600 + 32) + (32 + 1024) + (25600 + 32) +
                               (32 + 1024) + (2400 + 3);
  const auto m = CodecModel::create(ModelConfig{}, 0);
  EXPECT_EQ(expected, 119907u);
  EXPECT_EQ(m.receiver_parameter_count(), expected);
}

TEST(CodecModel, FlattenRoundTripsBitwise) {
  const auto a = CodecModel::create(ModelConfig{}, 11);
  auto b = CodecModel::create(ModelConfig{}, 12);
  ASSERT_FALSE(a == b);
  unflatten(flatten(a.receiver()), b.receiver());
  unflatten(flatten(a.transmitter()), b.transmitter());
  EXPECT_TRUE(a == b);
  std::vector<double> short_flat(10);
  EXPECT_THROW(unflatten(short_flat, b.receiver()), std::invalid_argument);
}

TEST(CodecModel, SeedDeterminesModel) {
  EXPECT_TRUE(CodecModel::create(ModelConfig{}, 7) == CodecModel::create(ModelConfig{}, 7));
  EXPECT_FALSE(CodecModel::create(ModelConfig{}, 7) == CodecModel::create(ModelConfig{}, 8));
}

namespace {

// Rate + distortion with all latents noisy, so the loss is smooth in every parameter.
Var noisy_objective(Tape& tape, const std::vector<Var>& v, std::size_t ntx, const Tensor& x, std::uint64_t seed) {
  std::span<const Var> all(v);
  const auto tx = all.subspan(0, ntx);
  const auto rx = all.subspan(ntx);
  Rng rng(seed);
  const Var xv = tape.constant(x);
  const auto z = codec::encode_latents(tx, xv, codec::LatentMode::noisy, &rng);
  const Var bits = codec::latent_rate(rx, z).total;
  const Var d = codec::distortion(codec::reconstruct(rx, z.z2), xv, x.dim(2), x.dim(3));
  return diff::add_scalars(diff::scale(bits, 1e-3), d);
}

}  // namespace

TEST(CodecGradients, AllParametersAgainstFiniteDifferences) {
  const auto m = CodecModel::create(tiny_config(), 21);
  const Tensor x = random_image(32, 32, 22);
  std::vector<Tensor> inputs;
  for (const auto& p : m.transmitter()) inputs.push_back(p.value);
  for (const auto& p : m.receiver()) inputs.push_back(p.value);
  const std::size_t ntx = m.transmitter().size();
  const auto r = check::check_gradients(
      [&](Tape& t, const std::vector<Var>& v) { return noisy_objective(t, v, ntx, x, 99); }, inputs, 5, 1e-6, 12);
  EXPECT_LE(r.rel_error, 1e-3);
  EXPECT_GT(r.checked, 200u);
}

TEST(CodecGradients, ReceiverUnderMixedQuantization) {
  // Distortion on STE-rounded z2 is piecewise smooth in theta (latents held fixed).
  const auto m = CodecModel::create(tiny_config(), 31);
  const Tensor x = random_image(32, 32, 32);
  Tensor z1, z2;
  {
    Tape tape;
    const auto tx = codec::bind(tape, m.transmitter(), false);
    const auto z = codec::encode_latents(tx, tape.constant(x), codec::LatentMode::deterministic);
    z1 = z.z1.value();
    z2 = z.z2.value();
  }
  std::vector<Tensor> inputs;
  for (const auto& p : m.receiver()) inputs.push_back(p.value);
  const auto r = check::check_gradients(
      [&](Tape& tape, const std::vector<Var>& rx) {
        Rng rng(77);
        const Var zz1 = tape.constant(z1), zz2 = tape.constant(z2);
        codec::LatentPair noisy{diff::add_uniform_noise(zz1, 1.0, rng), diff::add_uniform_noise(zz2, 1.0, rng)};
        const Var bits = codec::latent_rate(rx, noisy).total;
        const Var d = codec::distortion(codec::reconstruct(rx, diff::ste_round(zz2)), tape.constant(x), 32, 32);
        return diff::add_scalars(diff::scale(bits, 1e-2), d);
      },
      inputs, 6, 1e-6, 16);
  EXPECT_LE(r.rel_error, 1e-3);
}
