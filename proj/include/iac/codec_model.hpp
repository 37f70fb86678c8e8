#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "iac/diff/conv.hpp"
#include "iac/diff/likelihood.hpp"
#include "iac/diff/ops.hpp"

namespace iac {

/// Lower bound on every mean-scale density's scale.
inline constexpr double kScaleFloor = 1e-2;

/// Parameter groups; the first two are the transmitter side (phi), the rest the receiver side (theta).
enum class ParamGroup { encoder, hyper_encoder, hyperprior, hyper_decoder, decoder_weight, decoder_bias, decoder_gdn };

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::encoder: return "encoder";
    case ParamGroup::hyper_encoder: return "hyper_encoder";
    case ParamGroup::hyperprior: return "hyperprior";
    case ParamGroup::hyper_decoder: return "hyper_decoder";
    case ParamGroup::decoder_weight: return "decoder_weight";
    case ParamGroup::decoder_bias: return "decoder_bias";
    case ParamGroup::decoder_gdn: return "decoder_igdn";
  }
  return "?";
}

struct Parameter {
  std::string name;
  Tensor value;
  ParamGroup group;
};

using ParameterList = std::vector<Parameter>;

struct ModelConfig {
  std::size_t image_channels = 3;
  std::size_t channels = 32;         // encoder / decoder hidden width
  std::size_t latent_channels = 32;  // z2
  std::size_t hyper_channels = 32;
  std::size_t hyper_latent_channels = 16;  // z1
  std::size_t kernel = 5;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Transmitter parameter slots, in ParameterOrder.
enum TxSlot : std::size_t {
  kEnc0W, kEnc0B, kGdn0Beta, kGdn0Gamma, kEnc1W, kEnc1B, kGdn1Beta, kGdn1Gamma, kEnc2W, kEnc2B,
  kHenc0W, kHenc0B, kHenc1W, kHenc1B, kTxSlots
};

/// Receiver parameter slots, in ParameterOrder.
enum RxSlot : std::size_t {
  kPriorMean, kPriorScale, kHdec0W, kHdec0B, kHdec1W, kHdec1B, kDec0W, kDec0B, kIgdn0Beta, kIgdn0Gamma,
  kDec1W, kDec1B, kIgdn1Beta, kIgdn1Gamma, kDec2W, kDec2B, kRxSlots
};

/// Mean-scale hyperprior codec split into transmitter (phi) and receiver (theta) parameters.
class CodecModel {
 public:
  static constexpr std::size_t kCodecStride = 8;  // three stride-2 layers
  static constexpr std::size_t kHyperStride = 4;  // two stride-2 layers
  static constexpr std::size_t kPadMultiple = kCodecStride * kHyperStride;

  CodecModel() = default;

  static CodecModel create(const ModelConfig& cfg, std::uint64_t seed) {
    CodecModel m;
    m.config_ = cfg;
    Rng rng(seed);
    const std::size_t k = cfg.kernel, c = cfg.channels, img = cfg.image_channels;
    const std::size_t lat = cfg.latent_channels, hc = cfg.hyper_channels, hl = cfg.hyper_latent_channels;

    auto conv_w = [&](std::size_t out, std::size_t in) {
      Tensor w(Shape{out, in, k, k});
      const double sd = 1.0 / std::sqrt(static_cast<double>(in * k * k));
      for (double& v : w.values()) v = sd * rng.normal();
      return w;
    };
    auto deconv_w = [&](std::size_t in, std::size_t out) {
      Tensor w(Shape{in, out, k, k});
      const double sd = 1.0 / std::sqrt(static_cast<double>(in * k * k) / 4.0);
      for (double& v : w.values()) v = sd * rng.normal();
      return w;
    };
    auto bias = [](std::size_t n) { return Tensor(Shape{n}); };
    auto gdn_beta = [](std::size_t n) { return Tensor(Shape{n}, diff::inverse_softplus(1.0)); };
    auto gdn_gamma = [](std::size_t n) {
      Tensor g(Shape{n, n}, diff::inverse_softplus(1e-3));
      for (std::size_t i = 0; i < n; ++i) g[i * n + i] = diff::inverse_softplus(0.1);
      return g;
    };

    using G = ParamGroup;
    m.tx_ = {
        {"encoder.conv0.weight", conv_w(c, img), G::encoder},
        {"encoder.conv0.bias", bias(c), G::encoder},
        {"encoder.gdn0.beta", gdn_beta(c), G::encoder},
        {"encoder.gdn0.gamma", gdn_gamma(c), G::encoder},
        {"encoder.conv1.weight", conv_w(c, c), G::encoder},
        {"encoder.conv1.bias", bias(c), G::encoder},
        {"encoder.gdn1.beta", gdn_beta(c), G::encoder},
        {"encoder.gdn1.gamma", gdn_gamma(c), G::encoder},
        {"encoder.conv2.weight", conv_w(lat, c), G::encoder},
        {"encoder.conv2.bias", bias(lat), G::encoder},
        {"hyper_encoder.conv0.weight", conv_w(hc, lat), G::hyper_encoder},
        {"hyper_encoder.conv0.bias", bias(hc), G::hyper_encoder},
        {"hyper_encoder.conv1.weight", conv_w(hl, hc), G::hyper_encoder},
        {"hyper_encoder.conv1.bias", bias(hl), G::hyper_encoder},
    };
    m.rx_ = {
        {"hyperprior.mean", Tensor(Shape{hl}), G::hyperprior},
        {"hyperprior.scale", Tensor(Shape{hl}, diff::inverse_softplus(1.0)), G::hyperprior},
        {"hyper_decoder.deconv0.weight", deconv_w(hl, hc), G::hyper_decoder},
        {"hyper_decoder.deconv0.bias", bias(hc), G::hyper_decoder},
        {"hyper_decoder.deconv1.weight", deconv_w(hc, 2 * lat), G::hyper_decoder},
        {"hyper_decoder.deconv1.bias", bias(2 * lat), G::hyper_decoder},
        {"decoder.deconv0.weight", deconv_w(lat, c), G::decoder_weight},
        {"decoder.deconv0.bias", bias(c), G::decoder_bias},
        {"decoder.igdn0.beta", gdn_beta(c), G::decoder_gdn},
        {"decoder.igdn0.gamma", gdn_gamma(c), G::decoder_gdn},
        {"decoder.deconv1.weight", deconv_w(c, c), G::decoder_weight},
        {"decoder.deconv1.bias", bias(c), G::decoder_bias},
        {"decoder.igdn1.beta", gdn_beta(c), G::decoder_gdn},
        {"decoder.igdn1.gamma", gdn_gamma(c), G::decoder_gdn},
        {"decoder.deconv2.weight", deconv_w(c, img), G::decoder_weight},
        {"decoder.deconv2.bias", bias(img), G::decoder_bias},
    };
    return m;
  }

  const ModelConfig& config() const { return config_; }
  const ParameterList& transmitter() const { return tx_; }
  const ParameterList& receiver() const { return rx_; }
  ParameterList& transmitter() { return tx_; }
  ParameterList& receiver() { return rx_; }

  static std::size_t count(const ParameterList& ps) {
    std::size_t n = 0;
    for (const auto& p : ps) n += p.value.size();
    return n;
  }
  std::size_t receiver_parameter_count() const { return count(rx_); }
  std::size_t transmitter_parameter_count() const { return count(tx_); }

  friend bool operator==(const CodecModel& a, const CodecModel& b) {
    auto same = [](const ParameterList& x, const ParameterList& y) {
      if (x.size() != y.size()) return false;
      for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i].name != y[i].name || !(x[i].value == y[i].value) || x[i].group != y[i].group) return false;
      return true;
    };
    return a.config_ == b.config_ && same(a.tx_, b.tx_) && same(a.rx_, b.rx_);
  }

 private:
  ModelConfig config_;
  ParameterList tx_;
  ParameterList rx_;
};

/// Flattens a parameter list in ParameterOrder (list order, row-major within tensors).
inline std::vector<double> flatten(const ParameterList& ps) {
  std::vector<double> out;
  out.reserve(CodecModel::count(ps));
  for (const auto& p : ps) out.insert(out.end(), p.value.values().begin(), p.value.values().end());
  return out;
}

inline void unflatten(std::span<const double> flat, ParameterList& ps) {
  if (flat.size() != CodecModel::count(ps))
    throw std::invalid_argument("unflatten: " + std::to_string(flat.size()) + " values for " +
                                std::to_string(CodecModel::count(ps)) + " parameters");
  std::size_t off = 0;
  for (auto& p : ps) {
    std::copy_n(flat.begin() + static_cast<long>(off), p.value.size(), p.value.values().begin());
    off += p.value.size();
  }
}

/// Replicate-pads an NCHW image on the right/bottom to multiples of `multiple`.
inline Tensor pad_replicate(const Tensor& x, std::size_t multiple) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ph = (h + multiple - 1) / multiple * multiple, pw = (w + multiple - 1) / multiple * multiple;
  if (ph == h && pw == w) return x;
  Tensor y(Shape{n, c, ph, pw});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t i = 0; i < ph; ++i)
        for (std::size_t j = 0; j < pw; ++j) y.at(b, k, i, j) = x.at(b, k, std::min(i, h - 1), std::min(j, w - 1));
  return y;
}

namespace codec {

using diff::Tape;
using diff::Var;

enum class LatentMode { noisy, rounded, deterministic };

struct LatentPair {
  Var z1;  // hyper-latent
  Var z2;  // latent
};

struct MeanScale {
  Var mean;
  Var scale;
};

/// Puts parameters on the tape as leaves.
inline std::vector<Var> bind(Tape& tape, const ParameterList& ps, bool requires_grad) {
  std::vector<Var> vars;
  vars.reserve(ps.size());
  for (const auto& p : ps) vars.push_back(tape.leaf(p.value, requires_grad));
  return vars;
}

inline void check_divisible(const Shape& s) {
  if (s.size() != 4 || s[2] % CodecModel::kPadMultiple != 0 || s[3] % CodecModel::kPadMultiple != 0)
    throw std::invalid_argument("codec: input " + shape_str(s) + " must be NCHW with spatial dims divisible by " +
                                std::to_string(CodecModel::kPadMultiple) + "; pad the frame first");
}

inline Var positive(const Var& raw) { return diff::softplus(raw); }

inline Var scale_of(const Var& raw) {
  return diff::clamp(diff::softplus(raw), kScaleFloor, std::numeric_limits<double>::infinity());
}

inline Var conv_layer(const Var& x, const Var& w, const Var& b) { return diff::bias_add(diff::conv2d(x, w, 2, 2), b); }

inline Var deconv_layer(const Var& x, const Var& w, const Var& b) {
  return diff::bias_add(diff::conv_transpose2d(x, w, 2, 2, 1), b);
}

/// Encoder q_phi(z2 | x): raw (pre-quantization) latents.
inline Var analysis(std::span<const Var> tx, const Var& x) {
  check_divisible(x.shape());
  Var h = conv_layer(x, tx[kEnc0W], tx[kEnc0B]);
  h = diff::gdn(h, positive(tx[kGdn0Beta]), positive(tx[kGdn0Gamma]), false);
  h = conv_layer(h, tx[kEnc1W], tx[kEnc1B]);
  h = diff::gdn(h, positive(tx[kGdn1Beta]), positive(tx[kGdn1Gamma]), false);
  return conv_layer(h, tx[kEnc2W], tx[kEnc2B]);
}

/// Hyper-encoder q_phi(z1 | z2).
inline Var hyper_analysis(std::span<const Var> tx, const Var& z2) {
  Var h = diff::leaky_relu(conv_layer(z2, tx[kHenc0W], tx[kHenc0B]));
  return conv_layer(h, tx[kHenc1W], tx[kHenc1B]);
}

/// Hyper-decoder p_theta(z2 | z1): per-element mean and scale.
inline MeanScale hyper_synthesis(std::span<const Var> rx, const Var& z1) {
  Var h = diff::leaky_relu(deconv_layer(z1, rx[kHdec0W], rx[kHdec0B]));
  Var out = deconv_layer(h, rx[kHdec1W], rx[kHdec1B]);
  const std::size_t c = out.shape()[1] / 2;
  return {diff::slice_channels(out, 0, c), scale_of(diff::slice_channels(out, c, 2 * c))};
}

/// Hyperprior p_theta(z1): per-channel mean and scale broadcast to z1's shape.
inline MeanScale hyperprior(std::span<const Var> rx, const Shape& z1_shape) {
  return {diff::broadcast_channels(rx[kPriorMean], z1_shape),
          diff::broadcast_channels(scale_of(rx[kPriorScale]), z1_shape)};
}

/// Decoder p_theta(x | z2). Linear output; clamp only for evaluation.
inline Var reconstruct(std::span<const Var> rx, const Var& z2) {
  Var h = deconv_layer(z2, rx[kDec0W], rx[kDec0B]);
  h = diff::gdn(h, positive(rx[kIgdn0Beta]), positive(rx[kIgdn0Gamma]), true);
  h = deconv_layer(h, rx[kDec1W], rx[kDec1B]);
  h = diff::gdn(h, positive(rx[kIgdn1Beta]), positive(rx[kIgdn1Gamma]), true);
  return deconv_layer(h, rx[kDec2W], rx[kDec2B]);
}

/// Latents of x: noisy (unit uniform noise), rounded (STE) or deterministic (raw).
/// The hyper-encoder always sees the raw z2.
inline LatentPair encode_latents(std::span<const Var> tx, const Var& x, LatentMode mode, Rng* rng = nullptr) {
  Var z2 = analysis(tx, x);
  Var z1 = hyper_analysis(tx, z2);
  switch (mode) {
    case LatentMode::deterministic: return {z1, z2};
    case LatentMode::rounded: return {diff::ste_round(z1), diff::ste_round(z2)};
    case LatentMode::noisy:
      if (!rng) throw std::invalid_argument("encode_latents: noisy mode needs a generator");
      return {diff::add_uniform_noise(z1, 1.0, *rng), diff::add_uniform_noise(z2, 1.0, *rng)};
  }
  return {z1, z2};
}

struct RateTerms {
  Var z1_bits;  // scalar
  Var z2_bits;  // scalar
  Var total;    // scalar
};

/// Latent rate in bits: z1 under the hyperprior, z2 under hyper_synthesis(z1).
inline RateTerms latent_rate(std::span<const Var> rx, const LatentPair& z) {
  MeanScale hp = hyperprior(rx, z.z1.shape());
  Var b1 = diff::sum(diff::discretized_gaussian_bits(z.z1, hp.mean, hp.scale));
  MeanScale ms = hyper_synthesis(rx, z.z1);
  Var b2 = diff::sum(diff::discretized_gaussian_bits(z.z2, ms.mean, ms.scale));
  return {b1, b2, diff::add_scalars(b1, b2)};
}

/// Mean squared error over the top-left `height` x `width` region of the reconstruction.
inline Var distortion(const Var& x_hat, const Var& x, std::size_t height, std::size_t width) {
  Var d = diff::crop(x_hat, height, width) - diff::crop(x, height, width);
  return diff::mean(diff::square(d));
}

}  // namespace codec

}  // namespace iac
