#pragma once

#include <algorithm>
#include <atomic>
#include <array>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "iac/codec_model.hpp"
#include "iac/update_prior.hpp"
#include "iac/update_quantizer.hpp"

namespace iac {

using diff::Tape;
using diff::Var;

/// A frame (or batch of crops) padded for the codec, with the region that counts.
struct Frame {
  Tensor padded;  // [N,3,Hp,Wp]
  std::size_t height = 0, width = 0;

  std::size_t pixels() const { return padded.dim(0) * height * width; }
};

/// Pads an image [3,H,W] or [N,3,H,W] for the codec.
inline Frame prepare_frame(const Tensor& image) {
  Tensor x = image.rank() == 3 ? image.reshaped(Shape{1, image.dim(0), image.dim(1), image.dim(2)}) : image;
  if (x.rank() != 4) throw std::invalid_argument("prepare_frame: expected [3,H,W] or [N,3,H,W], got " + shape_str(x.shape()));
  Frame f;
  f.height = x.dim(2);
  f.width = x.dim(3);
  f.padded = pad_replicate(x, CodecModel::kPadMultiple);
  return f;
}

inline std::vector<Frame> prepare_frames(const std::vector<Tensor>& images) {
  std::vector<Frame> out;
  out.reserve(images.size());
  for (const auto& im : images) out.push_back(prepare_frame(im));
  return out;
}

inline std::size_t total_pixels(const std::vector<Frame>& frames) {
  std::size_t n = 0;
  for (const auto& f : frames) n += f.pixels();
  return n;
}

struct PriorConfig {
  double sigma = 0.05;
  double t = 0.005;
  double alpha = 1000.0;

  SpikeSlabPrior make() const { return SpikeSlabPrior(sigma, t, alpha); }
};

/// Adam with PyTorch's default moments and bias correction.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::size_t steps() const { return t_; }

  void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
    if (params.size() != grads.size()) throw std::invalid_argument("Adam: params/grads count mismatch");
    if (m_.empty()) {
      for (const Tensor* p : params) {
        m_.emplace_back(p->size(), 0.0);
        v_.emplace_back(p->size(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw std::invalid_argument("Adam: parameter list changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      Tensor& p = *params[k];
      const Tensor& g = *grads[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
        v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
        p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Losses

struct RdTerms {
  Var loss;             // beta * R_bpp + D
  double rate_bits = 0;
  double rate_bpp = 0;
  double distortion = 0;
};

/// RD loss from pre-quantization latents: rate on noisy {z1, z2}, distortion on rounded z2.
inline RdTerms rd_loss_from_latents(std::span<const Var> rx, const Var& z1, const Var& z2, const Var& x,
                                    const Frame& frame, double beta, Rng& rng) {
  codec::LatentPair noisy{diff::add_uniform_noise(z1, 1.0, rng), diff::add_uniform_noise(z2, 1.0, rng)};
  const Var bits = codec::latent_rate(rx, noisy).total;
  const Var x_hat = codec::reconstruct(rx, diff::ste_round(z2));
  const Var d = codec::distortion(x_hat, x, frame.height, frame.width);
  const double px = static_cast<double>(frame.pixels());
  RdTerms out;
  out.loss = diff::add_scalars(diff::scale(bits, beta / px), d);
  out.rate_bits = bits.value()[0];
  out.rate_bpp = out.rate_bits / px;
  out.distortion = d.value()[0];
  return out;
}

/// L_RD = beta * R + D for one frame (or crop batch).
inline RdTerms rd_loss(Tape& tape, std::span<const Var> tx, std::span<const Var> rx, const Frame& frame, double beta,
                       Rng& rng) {
  const Var x = tape.constant(frame.padded);
  const Var z2 = codec::analysis(tx, x);
  const Var z1 = codec::hyper_analysis(tx, z2);
  return rd_loss_from_latents(rx, z1, z2, x, frame, beta, rng);
}

/// Receiver parameters theta_D + Q_t(delta) (or theta_D + delta) on the tape.
inline std::vector<Var> offset_receiver(Tape& tape, const ParameterList& theta_d, std::span<const Var> delta,
                                        const QuantGrid* grid) {
  if (delta.size() != theta_d.size()) throw std::invalid_argument("offset_receiver: delta does not match receiver");
  std::vector<Var> rx;
  rx.reserve(theta_d.size());
  for (std::size_t i = 0; i < theta_d.size(); ++i) {
    if (delta[i].shape() != theta_d[i].value.shape())
      throw std::invalid_argument("offset_receiver: delta for " + theta_d[i].name + " has shape " +
                                  shape_str(delta[i].shape()) + ", expected " + shape_str(theta_d[i].value.shape()));
    const Var d = grid ? diff::quantize_ste(delta[i], *grid) : delta[i];
    rx.push_back(tape.constant(theta_d[i].value) + d);
  }
  return rx;
}

/// Continuous model rate M(delta) in bits summed over all receiver tensors.
inline Var model_rate(std::span<const Var> delta, const SpikeSlabPrior& prior) {
  Var total = diff::model_rate_continuous(delta[0], prior);
  for (std::size_t i = 1; i < delta.size(); ++i) total = diff::add_scalars(total, diff::model_rate_continuous(delta[i], prior));
  return total;
}

struct RdmTerms {
  Var loss;
  RdTerms rd;
  double model_bits = 0;  // continuous M, 0 when the term is off
};

struct RdmOptions {
  double beta = 1e-3;
  bool quantization_aware = true;
  bool model_rate_loss = true;
  std::size_t instance_pixels = 0;  // M is amortized over the whole instance set
};

/// L_RDM = L_RD(phi, theta_D + Q_t(delta)) + beta * M(delta) / instance pixels.
inline RdmTerms rdm_loss(Tape& tape, std::span<const Var> tx, const ParameterList& theta_d, std::span<const Var> delta,
                         const Frame& frame, const SpikeSlabPrior& prior, const RdmOptions& opt, Rng& rng) {
  if (opt.instance_pixels == 0) throw std::invalid_argument("rdm_loss: instance pixel count must be positive");
  const QuantGrid grid(prior);
  const auto rx = offset_receiver(tape, theta_d, delta, opt.quantization_aware ? &grid : nullptr);
  RdmTerms out;
  out.rd = rd_loss(tape, tx, rx, frame, opt.beta, rng);
  out.loss = out.rd.loss;
  if (opt.model_rate_loss) {
    const Var m = model_rate(delta, prior);
    out.model_bits = m.value()[0];
    out.loss = diff::add_scalars(out.loss, diff::scale(m, opt.beta / static_cast<double>(opt.instance_pixels)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation (rounded latents, clamped reconstruction, discrete model rate)

struct FrameEval {
  double bits = 0;
  double squared_error = 0;  // summed over the cropped region
  std::size_t pixels = 0;
  std::size_t values = 0;  // pixels * channels
};

struct RdEval {
  double rate_bits = 0;
  double rate_bpp = 0;
  double distortion = 0;  // MSE
  double psnr = 0;
  double rd = 0;  // beta * rate_bpp + distortion
};

struct InstanceEval {
  RdEval rd;
  double model_bits = 0;  // M-bar, discrete pmf on delta-bar
  double model_bpp = 0;
  double zero_model_bpp = 0;  // M-bar_0 in bpp
  double rdm = 0;             // rd + beta * model_bpp
  std::size_t nonzero = 0;    // ||delta-bar||_0
};

inline std::vector<Var> bind_tensors(Tape& tape, const std::vector<Tensor>& ts) {
  std::vector<Var> v;
  v.reserve(ts.size());
  for (const auto& t : ts) v.push_back(tape.constant(t));
  return v;
}

inline std::vector<Tensor> values_of(const ParameterList& ps) {
  std::vector<Tensor> out;
  out.reserve(ps.size());
  for (const auto& p : ps) out.push_back(p.value);
  return out;
}

/// Code length under rounded latents and the clamped reconstruction error of one frame.
inline FrameEval evaluate_latents(const std::vector<Tensor>& rx_values, const Tensor& z1, const Tensor& z2,
                                  const Frame& frame) {
  Tape tape;
  const auto rx = bind_tensors(tape, rx_values);
  codec::LatentPair z{diff::ste_round(tape.constant(z1)), diff::ste_round(tape.constant(z2))};
  FrameEval out;
  out.bits = codec::latent_rate(rx, z).total.value()[0];
  const Tensor& x_hat = codec::reconstruct(rx, z.z2).value();
  const Tensor& x = frame.padded;
  const std::size_t n = x.dim(0), c = x.dim(1);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t i = 0; i < frame.height; ++i)
        for (std::size_t j = 0; j < frame.width; ++j) {
          const double e = std::clamp(x_hat.at(b, k, i, j), 0.0, 1.0) - x.at(b, k, i, j);
          out.squared_error += e * e;
        }
  out.pixels = frame.pixels();
  out.values = out.pixels * c;
  return out;
}

struct RawLatents {
  Tensor z1, z2;  // pre-rounding
};

inline RawLatents analyze(const ParameterList& tx, const Frame& frame) {
  Tape tape;
  const auto txv = bind_tensors(tape, values_of(tx));
  const auto z = codec::encode_latents(txv, tape.constant(frame.padded), codec::LatentMode::deterministic);
  return {z.z1.value(), z.z2.value()};
}

inline FrameEval evaluate_frame(const ParameterList& tx, const std::vector<Tensor>& rx_values, const Frame& frame) {
  const RawLatents z = analyze(tx, frame);
  return evaluate_latents(rx_values, z.z1, z.z2, frame);
}

inline RdEval aggregate(const std::vector<FrameEval>& frames, double beta) {
  RdEval out;
  double se = 0.0;
  std::size_t px = 0, vals = 0;
  for (const auto& f : frames) {
    out.rate_bits += f.bits;
    se += f.squared_error;
    px += f.pixels;
    vals += f.values;
  }
  if (px == 0) return out;
  out.rate_bpp = out.rate_bits / static_cast<double>(px);
  out.distortion = se / static_cast<double>(vals);
  out.psnr = -10.0 * std::log10(out.distortion);
  out.rd = beta * out.rate_bpp + out.distortion;
  return out;
}

/// theta-bar = theta_D + delta-bar, computed exactly as the decoder does (grid level times t).
inline std::vector<Tensor> apply_update(const ParameterList& theta_d, const std::vector<Tensor>& delta_bar) {
  std::vector<Tensor> out = values_of(theta_d);
  for (std::size_t k = 0; k < out.size(); ++k)
    for (std::size_t i = 0; i < out[k].size(); ++i) out[k][i] += delta_bar[k][i];
  return out;
}

inline std::vector<Tensor> quantize_update(const std::vector<Tensor>& delta, const QuantGrid& grid) {
  std::vector<Tensor> out = delta;
  for (auto& t : out)
    for (double& v : t.values()) v = grid.quantize(v);
  return out;
}

inline std::vector<Tensor> zero_update(const ParameterList& theta_d) {
  std::vector<Tensor> out;
  for (const auto& p : theta_d) out.emplace_back(p.value.shape());
  return out;
}

inline std::size_t count_nonzero(const std::vector<Tensor>& ts) {
  std::size_t n = 0;
  for (const auto& t : ts)
    for (double v : t.values()) n += v != 0.0;
  return n;
}

/// M-bar in bits of a quantized update under the discrete prior.
inline double update_bits(const std::vector<Tensor>& delta_bar, const SpikeSlabPrior& prior) {
  std::vector<std::uint64_t> counts(static_cast<std::size_t>(prior.bin_count()), 0);
  for (const auto& t : delta_bar)
    for (double v : t.values()) ++counts[prior.symbol_of(v)];
  return prior.rate_from_counts(counts);
}

/// Full instance evaluation at (phi, theta_D + delta-bar). `delta_bar` empty means no update is sent.
inline InstanceEval evaluate_instance(const ParameterList& tx, const ParameterList& theta_d,
                                      const std::vector<Tensor>& delta_bar, const std::vector<Frame>& frames,
                                      double beta, const SpikeSlabPrior& prior) {
  const bool sends_update = !delta_bar.empty();
  const auto rx = sends_update ? apply_update(theta_d, delta_bar) : values_of(theta_d);
  std::vector<FrameEval> fe;
  for (const auto& f : frames) fe.push_back(evaluate_frame(tx, rx, f));
  InstanceEval out;
  out.rd = aggregate(fe, beta);
  const double px = static_cast<double>(total_pixels(frames));
  const double params = static_cast<double>(CodecModel::count(theta_d));
  out.zero_model_bpp = px > 0 ? params * prior.zero_update_bits() / px : 0.0;
  if (sends_update) {
    out.model_bits = update_bits(delta_bar, prior);
    out.model_bpp = px > 0 ? out.model_bits / px : 0.0;
    out.nonzero = count_nonzero(delta_bar);
  }
  out.rdm = out.rd.rd + beta * out.model_bpp;
  return out;
}

// ---------------------------------------------------------------------------
// Finetuning

enum class Regime { full_model, encoder_only, direct_latent };

inline const char* regime_name(Regime r) {
  switch (r) {
    case Regime::full_model: return "full_model";
    case Regime::encoder_only: return "encoder_only";
    case Regime::direct_latent: return "direct_latent";
  }
  return "?";
}

inline Regime parse_regime(const std::string& s) {
  if (s == "full_model" || s == "full-model" || s == "full") return Regime::full_model;
  if (s == "encoder_only" || s == "encoder-only" || s == "encoder") return Regime::encoder_only;
  if (s == "direct_latent" || s == "direct-latent" || s == "latent") return Regime::direct_latent;
  throw std::invalid_argument("unknown regime '" + s + "' (full_model | encoder_only | direct_latent)");
}

/// Which evaluated quantity picks the returned snapshot.
enum class SelectionKey : std::size_t { rdm = 0, rd_quantized = 1, rd_unquantized = 2 };

struct FinetuneConfig {
  Regime regime = Regime::full_model;
  double beta = 1e-3;
  std::size_t steps = 5000;
  double lr = 0.0;  // 0 selects the regime default
  bool quantization_aware = true;
  bool model_rate_loss = true;
  std::size_t eval_interval = 250;
  std::uint64_t seed = 0;
  PriorConfig prior;

  double learning_rate() const {
    if (lr > 0) return lr;
    switch (regime) {
      case Regime::full_model: return 1e-4;
      case Regime::encoder_only: return 1e-6;
      case Regime::direct_latent: return beta >= 1e-3 ? 5e-4 : 1e-3;
    }
    return 1e-4;
  }

  /// The evaluated form of this run's own objective.
  SelectionKey selection_key() const {
    if (regime == Regime::full_model && model_rate_loss) return SelectionKey::rdm;
    return SelectionKey::rd_quantized;
  }
};

struct EvalPoint {
  std::size_t step = 0;
  InstanceEval quantized;             // rounded latents at theta_D + delta-bar
  std::optional<RdEval> unquantized;  // at theta_D + delta, for runs that train without Q_t
  double best_key = 0;                // best value of the run's selection key so far
};

struct Snapshot {
  std::size_t step = 0;
  double key = 0;
  ParameterList transmitter;
  std::vector<Tensor> delta;                // raw update (full_model)
  std::vector<Tensor> delta_bar;            // quantized update (full_model)
  std::vector<RawLatents> latents;          // per-frame latents (direct_latent), pre-rounding
  EvalPoint eval;
};

struct FinetuneResult {
  FinetuneConfig config;
  std::vector<EvalPoint> evals;
  std::vector<double> train_loss;  // one entry per optimizer step
  std::array<std::optional<Snapshot>, 3> best;

  const Snapshot& best_snapshot() const { return snapshot(config.selection_key()); }

  const Snapshot& snapshot(SelectionKey k) const {
    const auto& s = best[static_cast<std::size_t>(k)];
    if (!s) throw std::logic_error("finetune: no snapshot recorded for the requested key");
    return *s;
  }
};

namespace detail {

inline double key_value(const EvalPoint& e, SelectionKey k) {
  switch (k) {
    case SelectionKey::rdm: return e.quantized.rdm;
    case SelectionKey::rd_quantized: return e.quantized.rd.rd;
    case SelectionKey::rd_unquantized: return e.unquantized ? e.unquantized->rd : e.quantized.rd.rd;
  }
  return 0;
}

}  // namespace detail

/// Instance-adaptive finetuning of a global model on a frame set.
/// full_model optimizes (phi, delta) under L_RDM; encoder_only optimizes phi under L_RD;
/// direct_latent optimizes per-frame latents under L_RD. theta_D is never modified.
inline FinetuneResult finetune(const CodecModel& global, const std::vector<Frame>& frames, const FinetuneConfig& cfg) {
  if (frames.empty()) throw std::invalid_argument("finetune: instance has no frames");
  if (cfg.eval_interval == 0) throw std::invalid_argument("finetune: eval_interval must be positive");
  const SpikeSlabPrior prior = cfg.prior.make();
  const QuantGrid grid(prior);
  const ParameterList& theta_d = global.receiver();
  const std::size_t instance_px = total_pixels(frames);

  FinetuneResult res;
  res.config = cfg;
  ParameterList tx = global.transmitter();
  std::vector<Tensor> delta = zero_update(theta_d);
  std::vector<RawLatents> latents;
  if (cfg.regime == Regime::direct_latent)
    for (const auto& f : frames) latents.push_back(analyze(tx, f));

  const bool full = cfg.regime == Regime::full_model;
  const bool track_unquantized = full && !cfg.quantization_aware;
  const auto rx_global = values_of(theta_d);

  auto evaluate = [&](std::size_t step) {
    EvalPoint e;
    e.step = step;
    if (cfg.regime == Regime::direct_latent) {
      std::vector<FrameEval> fe;
      for (std::size_t i = 0; i < frames.size(); ++i)
        fe.push_back(evaluate_latents(rx_global, latents[i].z1, latents[i].z2, frames[i]));
      e.quantized.rd = aggregate(fe, cfg.beta);
      e.quantized.rdm = e.quantized.rd.rd;
    } else {
      const std::vector<Tensor> delta_bar = full ? quantize_update(delta, grid) : std::vector<Tensor>{};
      e.quantized = evaluate_instance(tx, theta_d, delta_bar, frames, cfg.beta, prior);
      if (track_unquantized) {
        const auto rx = apply_update(theta_d, delta);
        std::vector<FrameEval> fe;
        for (const auto& f : frames) fe.push_back(evaluate_frame(tx, rx, f));
        e.unquantized = aggregate(fe, cfg.beta);
      }
    }
    for (std::size_t k = 0; k < 3; ++k) {
      const auto key = static_cast<SelectionKey>(k);
      if (key == SelectionKey::rd_unquantized && !track_unquantized) continue;
      const double v = detail::key_value(e, key);
      auto& slot = res.best[k];
      if (!slot || v < slot->key) {
        Snapshot s;
        s.step = step;
        s.key = v;
        s.transmitter = tx;
        if (full) {
          s.delta = delta;
          s.delta_bar = quantize_update(delta, grid);
        }
        s.latents = latents;
        s.eval = e;
        slot = std::move(s);
      }
    }
    e.best_key = res.best[static_cast<std::size_t>(cfg.selection_key())]->key;
    res.best[static_cast<std::size_t>(cfg.selection_key())]->eval.best_key = e.best_key;
    res.evals.push_back(e);
  };

  evaluate(0);
  Rng rng(cfg.seed);
  Adam adam(cfg.learning_rate());
  std::vector<Adam> latent_adams(cfg.regime == Regime::direct_latent ? frames.size() : 0, Adam(cfg.learning_rate()));
  res.train_loss.reserve(cfg.steps);

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const std::size_t fi = (step - 1) % frames.size();
    const Frame& frame = frames[fi];
    Tape tape;
    double loss_value = 0.0;
    if (cfg.regime == Regime::direct_latent) {
      const auto rx = bind_tensors(tape, rx_global);
      const Var z1 = tape.leaf(latents[fi].z1), z2 = tape.leaf(latents[fi].z2);
      const Var x = tape.constant(frame.padded);
      const RdTerms t = rd_loss_from_latents(rx, z1, z2, x, frame, cfg.beta, rng);
      tape.backward(t.loss);
      loss_value = t.loss.value()[0];
      latent_adams[fi].step({&latents[fi].z1, &latents[fi].z2}, {&tape.grad(z1), &tape.grad(z2)});
    } else {
      const auto txv = codec::bind(tape, tx, true);
      std::vector<Tensor*> params;
      std::vector<const Tensor*> grads;
      Var loss;
      std::vector<Var> dv;
      if (full) {
        for (const auto& d : delta) dv.push_back(tape.leaf(d));
        RdmOptions opt{cfg.beta, cfg.quantization_aware, cfg.model_rate_loss, instance_px};
        loss = rdm_loss(tape, txv, theta_d, dv, frame, prior, opt, rng).loss;
      } else {
        const auto rx = bind_tensors(tape, rx_global);
        loss = rd_loss(tape, txv, rx, frame, cfg.beta, rng).loss;
      }
      tape.backward(loss);
      loss_value = loss.value()[0];
      for (std::size_t i = 0; i < tx.size(); ++i) {
        params.push_back(&tx[i].value);
        grads.push_back(&tape.grad(txv[i]));
      }
      for (std::size_t i = 0; i < dv.size(); ++i) {
        params.push_back(&delta[i]);
        grads.push_back(&tape.grad(dv[i]));
      }
      adam.step(params, grads);
    }
    res.train_loss.push_back(loss_value);
    if (step % cfg.eval_interval == 0 || step == cfg.steps) evaluate(step);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Global training

struct GlobalTrainConfig {
  double beta = 1e-3;
  std::size_t steps = 2000;
  std::size_t crop = 64;
  std::size_t batch = 4;
  double lr = 1e-4;
  std::uint64_t seed = 0;
  ModelConfig model;
};

struct TrainPoint {
  std::size_t step = 0;
  double loss = 0, rate_bpp = 0, distortion = 0, lr = 0;
};

struct GlobalTrainResult {
  CodecModel model;
  std::vector<TrainPoint> curve;
};

/// Learning rate at 0-based `step`: `base` until 90% of the budget, then base / 10.
inline double global_lr(std::size_t step, std::size_t steps, double base) {
  return step >= steps * 9 / 10 ? base / 10.0 : base;
}

/// Random crop batch [B,3,c,c] from images of at least c x c.
inline Tensor random_crops(const std::vector<const Tensor*>& images, std::size_t crop, std::size_t batch, Rng& rng) {
  Tensor out(Shape{batch, 3, crop, crop});
  for (std::size_t b = 0; b < batch; ++b) {
    const Tensor& im = *images[rng.below(images.size())];
    const std::size_t y0 = rng.below(im.dim(1) - crop + 1), x0 = rng.below(im.dim(2) - crop + 1);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < crop; ++i)
        for (std::size_t j = 0; j < crop; ++j)
          out.at(b, c, i, j) = im[(c * im.dim(1) + y0 + i) * im.dim(2) + x0 + j];
  }
  return out;
}

/// Minimizes L_RD over random crops of `images` ([3,H,W] in [0,1]).
inline GlobalTrainResult train_global(const std::vector<Tensor>& images, const GlobalTrainConfig& cfg,
                                      const CodecModel* init = nullptr) {
  if (cfg.crop == 0 || cfg.crop % CodecModel::kPadMultiple != 0)
    throw std::invalid_argument("train_global: crop must be a positive multiple of " +
                                std::to_string(CodecModel::kPadMultiple));
  std::vector<const Tensor*> usable;
  for (const auto& im : images)
    if (im.rank() == 3 && im.dim(0) == 3 && im.dim(1) >= cfg.crop && im.dim(2) >= cfg.crop) usable.push_back(&im);
  if (usable.empty()) throw std::invalid_argument("train_global: no image is at least crop x crop");

  GlobalTrainResult res;
  res.model = init ? *init : CodecModel::create(cfg.model, cfg.seed);
  Rng data_rng(cfg.seed ^ 0xC0FFEEull), noise_rng(cfg.seed + 1);
  Adam adam(cfg.lr);
  auto& tx = res.model.transmitter();
  auto& rx = res.model.receiver();
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    adam.set_lr(global_lr(step, cfg.steps, cfg.lr));
    Frame f = prepare_frame(random_crops(usable, cfg.crop, cfg.batch, data_rng));
    Tape tape;
    const auto txv = codec::bind(tape, tx, true);
    const auto rxv = codec::bind(tape, rx, true);
    const RdTerms t = rd_loss(tape, txv, rxv, f, cfg.beta, noise_rng);
    tape.backward(t.loss);
    std::vector<Tensor*> params;
    std::vector<const Tensor*> grads;
    for (std::size_t i = 0; i < tx.size(); ++i) {
      params.push_back(&tx[i].value);
      grads.push_back(&tape.grad(txv[i]));
    }
    for (std::size_t i = 0; i < rx.size(); ++i) {
      params.push_back(&rx[i].value);
      grads.push_back(&tape.grad(rxv[i]));
    }
    adam.step(params, grads);
    res.curve.push_back({step, t.loss.value()[0], t.rate_bpp, t.distortion, adam.lr()});
  }
  return res;
}

// ---------------------------------------------------------------------------
// Representative instance selection

struct Selection {
  std::vector<std::size_t> chosen;   // instance indices, in target order
  std::vector<double> average_rank;  // per instance (1 = lowest loss)
  std::vector<double> percentile;    // per instance, (average_rank - 1) / (count - 1)
  std::vector<double> targets;       // k / (n + 1)
};

/// Ranks instances by loss under each beta (ties share the average rank), averages the
/// ranks across betas and picks, for each target percentile k/(n+1), the closest unpicked
/// instance. Equal distances go to the instance whose name sorts first.
inline Selection select_representative_instances(const std::vector<std::string>& names,
                                                 const std::vector<std::vector<double>>& loss_per_beta,
                                                 std::size_t n) {
  const std::size_t m = names.size();
  if (n == 0 || n > m) throw std::invalid_argument("select: need 1 <= n <= instance count");
  if (loss_per_beta.empty()) throw std::invalid_argument("select: need losses for at least one beta");
  Selection out;
  out.average_rank.assign(m, 0.0);
  for (const auto& losses : loss_per_beta) {
    if (losses.size() != m) throw std::invalid_argument("select: loss row size does not match instance count");
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return losses[a] < losses[b]; });
    for (std::size_t i = 0; i < m;) {
      std::size_t j = i;
      while (j + 1 < m && losses[order[j + 1]] == losses[order[i]]) ++j;
      const double shared = (static_cast<double>(i + j) / 2.0) + 1.0;
      for (std::size_t k = i; k <= j; ++k) out.average_rank[order[k]] += shared;
      i = j + 1;
    }
  }
  for (double& r : out.average_rank) r /= static_cast<double>(loss_per_beta.size());
  out.percentile.resize(m);
  for (std::size_t i = 0; i < m; ++i)
    out.percentile[i] = m > 1 ? (out.average_rank[i] - 1.0) / static_cast<double>(m - 1) : 0.5;

  std::vector<std::size_t> by_name(m);
  std::iota(by_name.begin(), by_name.end(), 0);
  std::stable_sort(by_name.begin(), by_name.end(), [&](std::size_t a, std::size_t b) { return names[a] < names[b]; });
  std::vector<bool> taken(m, false);
  constexpr double kTie = 1e-12;
  for (std::size_t k = 1; k <= n; ++k) {
    const double target = static_cast<double>(k) / static_cast<double>(n + 1);
    out.targets.push_back(target);
    std::size_t pick = m;
    double best = 0.0;
    for (std::size_t idx : by_name) {
      if (taken[idx]) continue;
      const double d = std::fabs(out.percentile[idx] - target);
      if (pick == m || d < best - kTie) {
        pick = idx;
        best = d;
      }
    }
    taken[pick] = true;
    out.chosen.push_back(pick);
  }
  return out;
}

/// Per-beta global-model RD losses of each instance (rows: betas, columns: instances).
inline std::vector<std::vector<double>> instance_rd_losses(const std::vector<CodecModel>& models,
                                                           const std::vector<double>& betas,
                                                           const std::vector<std::vector<Frame>>& instances) {
  if (models.size() != betas.size()) throw std::invalid_argument("instance_rd_losses: one model per beta required");
  std::vector<std::vector<double>> out(betas.size());
  for (std::size_t b = 0; b < betas.size(); ++b) {
    const auto rx = values_of(models[b].receiver());
    for (const auto& inst : instances) {
      std::vector<FrameEval> fe;
      for (const auto& f : inst) fe.push_back(evaluate_frame(models[b].transmitter(), rx, f));
      out[b].push_back(aggregate(fe, betas[b]).rd);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ablations

enum class AblationCase { I, II, III, IV, V, VI };

inline const char* case_name(AblationCase c) {
  static const char* names[] = {"I", "II", "III", "IV", "V", "VI"};
  return names[static_cast<int>(c)];
}

inline AblationCase parse_case(const std::string& s) {
  static const char* names[] = {"I", "II", "III", "IV", "V", "VI"};
  for (int i = 0; i < 6; ++i)
    if (s == names[i]) return static_cast<AblationCase>(i);
  throw std::invalid_argument("unknown ablation case '" + s + "' (I..VI)");
}

struct AblationRow {
  AblationCase which;
  bool quantization_aware, model_rate_loss, counts_model_rate;
  std::size_t step = 0;  // snapshot step
  double rate_bpp = 0;   // R
  double model_bpp = 0;  // M-bar as reported (0 for V/VI)
  double distortion = 0;
  double psnr = 0;
  double loss = 0;  // RD + beta * reported M-bar
  std::size_t nonzero = 0;

  double total_rate() const { return rate_bpp + model_bpp; }
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<FinetuneResult> runs;  // underlying runs, keyed by (quantization_aware, model_rate_loss)
};

/// Runs the finetuning configurations behind the requested cases (shared seed) and
/// reports each case from the snapshot picked by its own objective. V and VI reuse the
/// runs of III and IV and leave M-bar out of the reported rate; VI reports the
/// unquantized model theta_D + delta.
inline AblationResult ablate(const CodecModel& global, const std::vector<Frame>& frames, FinetuneConfig base,
                             const std::vector<AblationCase>& cases, std::size_t threads = 1) {
  struct Spec {
    bool qa, mrl, counts;
  };
  auto spec = [](AblationCase c) -> Spec {
    switch (c) {
      case AblationCase::I: return {true, true, true};
      case AblationCase::II: return {false, true, true};
      case AblationCase::III: return {true, false, true};
      case AblationCase::IV: return {false, false, true};
      case AblationCase::V: return {true, false, false};
      case AblationCase::VI: return {false, false, false};
    }
    return {true, true, true};
  };
  AblationResult out;
  std::vector<int> keys;  // qa*2 + mrl, in order of first use
  for (AblationCase c : cases) {
    const Spec s = spec(c);
    const int key = (s.qa ? 2 : 0) + (s.mrl ? 1 : 0);
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
  }
  out.runs.resize(keys.size());
  // Runs share nothing but the read-only global model, so they can proceed in parallel.
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i; (i = next++) < keys.size();) {
      try {
        FinetuneConfig cfg = base;
        cfg.regime = Regime::full_model;
        cfg.quantization_aware = keys[i] & 2;
        cfg.model_rate_loss = keys[i] & 1;
        out.runs[i] = finetune(global, frames, cfg);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(threads, 1, keys.size() ? keys.size() : 1);
  std::vector<std::thread> pool;
  for (std::size_t i = 1; i < n_threads; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  auto run_for = [&](bool qa, bool mrl) -> const FinetuneResult& {
    const int key = (qa ? 2 : 0) + (mrl ? 1 : 0);
    return out.runs[static_cast<std::size_t>(std::find(keys.begin(), keys.end(), key) - keys.begin())];
  };
  for (AblationCase c : cases) {
    const Spec s = spec(c);
    const FinetuneResult& r = run_for(s.qa, s.mrl);
    AblationRow row{c, s.qa, s.mrl, s.counts};
    if (c == AblationCase::VI) {
      const Snapshot& snap = r.snapshot(SelectionKey::rd_unquantized);
      const RdEval& u = *snap.eval.unquantized;
      row.step = snap.step;
      row.rate_bpp = u.rate_bpp;
      row.distortion = u.distortion;
      row.psnr = u.psnr;
      row.loss = u.rd;
      row.nonzero = snap.eval.quantized.nonzero;
    } else {
      const Snapshot& snap = r.best_snapshot();
      const InstanceEval& q = snap.eval.quantized;
      row.step = snap.step;
      row.rate_bpp = q.rd.rate_bpp;
      row.model_bpp = s.counts ? q.model_bpp : 0.0;
      row.distortion = q.rd.distortion;
      row.psnr = q.rd.psnr;
      row.loss = q.rd.rd + base.beta * row.model_bpp;
      row.nonzero = q.nonzero;
    }
    out.rows.push_back(row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Temporal ablation

/// f equispaced frame indices starting at 0.
inline std::vector<std::size_t> equispaced_indices(std::size_t available, std::size_t f) {
  if (f == 0 || f > available) throw std::invalid_argument("equispaced_indices: need 1 <= f <= frame count");
  std::vector<std::size_t> idx(f);
  for (std::size_t i = 0; i < f; ++i) idx[i] = i * available / f;
  return idx;
}

inline std::vector<std::size_t> default_frame_counts(std::size_t available) {
  std::vector<std::size_t> out;
  for (std::size_t f : {1, 2, 5, 10, 25, 50, 100, 250, 500})
    if (f <= available) out.push_back(f);
  return out;
}

struct TemporalRow {
  std::size_t frames = 0;
  double beta = 0;
  Regime regime = Regime::full_model;
  std::size_t step = 0;  // step of the selected snapshot
  InstanceEval best;
};

inline std::vector<TemporalRow> temporal_ablation(const CodecModel& global, const std::vector<Frame>& frames,
                                                  const std::vector<std::size_t>& f_values,
                                                  const std::vector<double>& betas, FinetuneConfig base) {
  std::vector<TemporalRow> rows;
  for (std::size_t f : f_values) {
    std::vector<Frame> subset;
    for (std::size_t i : equispaced_indices(frames.size(), f)) subset.push_back(frames[i]);
    for (double beta : betas)
      for (Regime r : {Regime::full_model, Regime::encoder_only}) {
        FinetuneConfig cfg = base;
        cfg.regime = r;
        cfg.beta = beta;
        cfg.quantization_aware = true;
        cfg.model_rate_loss = true;
        const FinetuneResult res = finetune(global, subset, cfg);
        rows.push_back({f, beta, r, res.best_snapshot().step, res.best_snapshot().eval.quantized});
      }
  }
  return rows;
}

}  // namespace iac
