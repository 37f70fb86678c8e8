#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "iac/bytes.hpp"
#include "iac/checkpoint.hpp"
#include "iac/codec_model.hpp"
#include "iac/entropy_coder.hpp"
#include "iac/training.hpp"
#include "iac/update_quantizer.hpp"

namespace iac {

enum class StreamErrorKind { bad_magic, unsupported_version, header_crc, model_mismatch, truncated, stream_length, stream_crc, malformed };

inline const char* error_kind_name(StreamErrorKind k) {
  switch (k) {
    case StreamErrorKind::bad_magic: return "bad_magic";
    case StreamErrorKind::unsupported_version: return "unsupported_version";
    case StreamErrorKind::header_crc: return "header_crc";
    case StreamErrorKind::model_mismatch: return "model_mismatch";
    case StreamErrorKind::truncated: return "truncated";
    case StreamErrorKind::stream_length: return "stream_length";
    case StreamErrorKind::stream_crc: return "stream_crc";
    case StreamErrorKind::malformed: return "malformed";
  }
  return "?";
}

struct StreamError : std::runtime_error {
  StreamError(StreamErrorKind k, const std::string& msg)
      : std::runtime_error(std::string(error_kind_name(k)) + ": " + msg), kind(k) {}
  StreamErrorKind kind;
};

inline constexpr std::uint16_t kStreamVersion = 1;
inline constexpr std::uint16_t kFlagHasUpdate = 1;

struct StreamHeader {
  std::uint16_t version = kStreamVersion;
  std::uint16_t flags = 0;
  std::uint32_t width = 0, height = 0, frame_count = 0;
  double beta = 0, t = 0, sigma = 0, alpha = 0;
  std::uint32_t bins = 0;
  Digest model{};
  std::uint32_t delta_symbols = 0;
  std::vector<std::uint32_t> stream_lengths;  // payload bytes: [b_delta,] then one per frame

  bool has_update() const { return flags & kFlagHasUpdate; }
  std::size_t padded_height() const { return (height + CodecModel::kPadMultiple - 1) / CodecModel::kPadMultiple * CodecModel::kPadMultiple; }
  std::size_t padded_width() const { return (width + CodecModel::kPadMultiple - 1) / CodecModel::kPadMultiple * CodecModel::kPadMultiple; }
};

/// Integer latents of one frame, stored as doubles.
struct FrameLatents {
  Tensor z1, z2;
};

struct EncodedInstance {
  Bytes bytes;
  StreamHeader header;
  double model_bits = 0;   // computed M-bar, -sum log2 p[delta-bar]
  double latent_bits = 0;  // computed R, -sum log2 P under floored unit-bin masses
  std::vector<double> frame_latent_bits;
  std::size_t delta_symbols = 0;
  std::vector<std::size_t> frame_symbols;
  std::vector<Tensor> reconstructions;  // [3,H,W], clamped and cropped, transmitter side
  std::vector<FrameLatents> latents;
};

struct DecodedInstance {
  StreamHeader header;
  std::vector<Tensor> theta_bar;
  std::vector<Tensor> delta_bar;  // empty when no update was sent
  std::vector<FrameLatents> latents;
  std::vector<Tensor> frames;  // [3,H,W], clamped and cropped
  double model_bits = 0;
  double latent_bits = 0;
};

namespace bitstream {

inline constexpr char kMagic[4] = {'I', 'A', 'C', '1'};
inline constexpr std::size_t kFixedHeader = 96;

/// Mean/scale tensors of the hyperprior (z1) given its shape.
inline std::pair<Tensor, Tensor> z1_params(const std::vector<Tensor>& rx_values, const Shape& z1_shape) {
  Tape tape;
  const auto rx = bind_tensors(tape, rx_values);
  const auto ms = codec::hyperprior(rx, z1_shape);
  return {ms.mean.value(), ms.scale.value()};
}

inline std::pair<Tensor, Tensor> z2_params(const std::vector<Tensor>& rx_values, const Tensor& z1) {
  Tape tape;
  const auto rx = bind_tensors(tape, rx_values);
  const auto ms = codec::hyper_synthesis(rx, tape.constant(z1));
  return {ms.mean.value(), ms.scale.value()};
}

/// Reconstruction of integer latents, clamped to [0,1] and cropped to h x w: [3,h,w].
inline Tensor reconstruct_frame(const std::vector<Tensor>& rx_values, const Tensor& z2, std::size_t h, std::size_t w) {
  Tape tape;
  const auto rx = bind_tensors(tape, rx_values);
  const Tensor& y = codec::reconstruct(rx, tape.constant(z2)).value();
  Tensor out(Shape{3, h, w});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) out[(c * h + i) * w + j] = std::clamp(y.at(0, c, i, j), 0.0, 1.0);
  return out;
}

/// Latent code length of integer latents in bits (same accounting as evaluation).
inline double latent_bits(const std::vector<Tensor>& rx_values, const Tensor& z1, const Tensor& z2) {
  Tape tape;
  const auto rx = bind_tensors(tape, rx_values);
  return codec::latent_rate(rx, {tape.constant(z1), tape.constant(z2)}).total.value()[0];
}

inline long to_level(double v) {
  if (!std::isfinite(v) || std::fabs(v) > static_cast<double>(kLatentLimit))
    throw std::out_of_range("latent value " + std::to_string(v) + " cannot be entropy coded");
  return static_cast<long>(v);
}

inline void encode_tensor(RangeEncoder& enc, const Tensor& z, const Tensor& mean, const Tensor& scale) {
  for (std::size_t i = 0; i < z.size(); ++i) encode_latent(enc, latent_table(mean[i], scale[i]), to_level(z[i]));
}

inline Tensor decode_tensor(RangeDecoder& dec, const Shape& shape, const Tensor& mean, const Tensor& scale) {
  Tensor z(shape);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = static_cast<double>(decode_latent(dec, latent_table(mean[i], scale[i])));
  return z;
}

inline void write_header(ByteWriter& w, const StreamHeader& h) {
  w.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(kMagic), 4));
  w.put<std::uint16_t>(h.version);
  w.put<std::uint16_t>(h.flags);
  w.put<std::uint32_t>(h.width);
  w.put<std::uint32_t>(h.height);
  w.put<std::uint32_t>(h.frame_count);
  for (double v : {h.beta, h.t, h.sigma, h.alpha}) w.put<double>(v);
  w.put<std::uint32_t>(h.bins);
  w.put_bytes(h.model);
  w.put<std::uint32_t>(h.delta_symbols);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(h.stream_lengths.size()));
  for (auto n : h.stream_lengths) w.put<std::uint32_t>(n);
  w.put<std::uint32_t>(crc32_of(w.bytes()));
}

inline void write_stream(ByteWriter& w, const Bytes& payload) {
  const std::size_t start = w.size();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(payload.size()));
  w.put_bytes(payload);
  w.put<std::uint32_t>(crc32_of(std::span(w.bytes()).subspan(start)));
}

}  // namespace bitstream

/// Serializes an instance: header, then b_delta (if an update is sent), then one latent
/// stream per frame (z1 under the hyperprior, then z2 under the hyper-decoder's tables),
/// all tables taken from theta-bar = theta_D + delta-bar.
inline EncodedInstance encode_instance(const std::vector<Frame>& frames, const CodecModel& global,
                                       const ParameterList& transmitter, const std::vector<Tensor>& delta_bar,
                                       const PriorConfig& prior_cfg, double beta) {
  const SpikeSlabPrior prior = prior_cfg.make();
  const QuantGrid grid(prior);
  const bool update = !delta_bar.empty();
  if (update && delta_bar.size() != global.receiver().size())
    throw std::invalid_argument("encode_instance: update does not match the receiver parameter list");
  for (std::size_t k = 0; k < delta_bar.size(); ++k)
    if (delta_bar[k].shape() != global.receiver()[k].value.shape())
      throw std::invalid_argument("encode_instance: update for " + global.receiver()[k].name + " has the wrong shape");

  EncodedInstance out;
  StreamHeader& h = out.header;
  h.flags = update ? kFlagHasUpdate : 0;
  h.frame_count = static_cast<std::uint32_t>(frames.size());
  if (!frames.empty()) {
    h.height = static_cast<std::uint32_t>(frames[0].height);
    h.width = static_cast<std::uint32_t>(frames[0].width);
  }
  for (const auto& f : frames) {
    if (f.padded.dim(0) != 1) throw std::invalid_argument("encode_instance: frames must be single images");
    if (f.height != h.height || f.width != h.width) throw std::invalid_argument("encode_instance: frames differ in size");
  }
  h.beta = beta;
  h.t = prior_cfg.t;
  h.sigma = prior_cfg.sigma;
  h.alpha = prior_cfg.alpha;
  h.bins = static_cast<std::uint32_t>(prior.bin_count());
  h.model = model_hash(global);

  std::vector<Bytes> payloads;
  if (update) {
    const FrequencyTable table = freq_from_pmf(prior.pmf().masses);
    RangeEncoder enc;
    for (const auto& t : delta_bar)
      for (double v : t.values()) enc.encode(table, grid.bin_index(v));
    out.delta_symbols = enc.symbols();
    h.delta_symbols = static_cast<std::uint32_t>(out.delta_symbols);
    out.model_bits = update_bits(delta_bar, prior);
    payloads.push_back(enc.finish());
  }

  const auto rx = update ? apply_update(global.receiver(), delta_bar) : values_of(global.receiver());
  for (const auto& f : frames) {
    const RawLatents raw = analyze(transmitter, f);
    FrameLatents z{raw.z1, raw.z2};
    for (double& v : z.z1.values()) v = std::round(v);
    for (double& v : z.z2.values()) v = std::round(v);
    const auto [m1, s1] = bitstream::z1_params(rx, z.z1.shape());
    const auto [m2, s2] = bitstream::z2_params(rx, z.z1);
    RangeEncoder enc;
    bitstream::encode_tensor(enc, z.z1, m1, s1);
    bitstream::encode_tensor(enc, z.z2, m2, s2);
    out.frame_symbols.push_back(enc.symbols());
    payloads.push_back(enc.finish());
    const double bits = bitstream::latent_bits(rx, z.z1, z.z2);
    out.frame_latent_bits.push_back(bits);
    out.latent_bits += bits;
    out.reconstructions.push_back(bitstream::reconstruct_frame(rx, z.z2, f.height, f.width));
    out.latents.push_back(std::move(z));
  }

  for (const auto& p : payloads) {
    if (p.size() > 0xFFFFFFF0u) throw std::length_error("encode_instance: sub-stream exceeds 4 GiB");
    h.stream_lengths.push_back(static_cast<std::uint32_t>(p.size()));
  }
  ByteWriter w;
  bitstream::write_header(w, h);
  for (const auto& p : payloads) bitstream::write_stream(w, p);
  out.bytes = w.take();
  return out;
}

/// Decodes b_delta first (theta-bar depends on it), then every frame's latents, then
/// reconstructs. Each failure mode raises a distinct StreamErrorKind.
inline DecodedInstance decode_instance(std::span<const std::uint8_t> data, const CodecModel& global) {
  using K = StreamErrorKind;
  ByteReader r(data);
  auto need = [&](std::size_t n, const char* where) {
    if (r.remaining() < n) throw StreamError(K::truncated, std::string("stream ends inside ") + where);
  };
  need(4, "the magic");
  if (std::memcmp(r.take(4).data(), bitstream::kMagic, 4) != 0) throw StreamError(K::bad_magic, "not an IAC1 stream");
  need(2, "the header");
  DecodedInstance out;
  StreamHeader& h = out.header;
  h.version = r.get<std::uint16_t>();
  if (h.version != kStreamVersion)
    throw StreamError(K::unsupported_version, "stream version " + std::to_string(h.version) + ", this decoder reads " +
                                                  std::to_string(kStreamVersion));
  need(bitstream::kFixedHeader - 6, "the header");
  h.flags = r.get<std::uint16_t>();
  h.width = r.get<std::uint32_t>();
  h.height = r.get<std::uint32_t>();
  h.frame_count = r.get<std::uint32_t>();
  h.beta = r.get<double>();
  h.t = r.get<double>();
  h.sigma = r.get<double>();
  h.alpha = r.get<double>();
  h.bins = r.get<std::uint32_t>();
  const auto mh = r.take(32);
  std::copy(mh.begin(), mh.end(), h.model.begin());
  h.delta_symbols = r.get<std::uint32_t>();
  const auto streams = r.get<std::uint32_t>();
  if (streams > r.remaining() / 4) throw StreamError(K::truncated, "stream ends inside the length table");
  for (std::uint32_t i = 0; i < streams; ++i) h.stream_lengths.push_back(r.get<std::uint32_t>());
  need(4, "the header CRC");
  const std::size_t header_len = r.position();
  if (r.get<std::uint32_t>() != crc32_of(data.first(header_len))) throw StreamError(K::header_crc, "header CRC mismatch");

  if (h.model != model_hash(global))
    throw StreamError(K::model_mismatch, "stream was encoded against global model " + hex(h.model) + ", decoder has " +
                                             hex(model_hash(global)));
  const bool update = h.has_update();
  if ((h.flags & ~kFlagHasUpdate) != 0) throw StreamError(K::malformed, "unknown flag bits");
  if (streams != h.frame_count + (update ? 1u : 0u)) throw StreamError(K::malformed, "stream count does not match frames");
  if (h.frame_count > 0 && (h.width == 0 || h.height == 0)) throw StreamError(K::malformed, "zero frame size");
  std::optional<SpikeSlabPrior> prior;
  try {
    prior.emplace(h.sigma, h.t, h.alpha);
  } catch (const std::exception& e) {
    throw StreamError(K::malformed, std::string("invalid prior parameters: ") + e.what());
  }
  if (static_cast<std::uint32_t>(prior->bin_count()) != h.bins) throw StreamError(K::malformed, "bin count disagrees with prior");
  if (update && h.delta_symbols != global.receiver_parameter_count())
    throw StreamError(K::malformed, "update symbol count does not match the receiver");

  std::size_t stream_index = 0;
  auto next_payload = [&]() -> std::span<const std::uint8_t> {
    const std::size_t start = r.position();
    need(4, "a sub-stream length");
    const auto len = r.get<std::uint32_t>();
    if (len != h.stream_lengths[stream_index])
      throw StreamError(K::stream_length, "sub-stream " + std::to_string(stream_index) + " length " + std::to_string(len) +
                                              " disagrees with header " + std::to_string(h.stream_lengths[stream_index]));
    need(static_cast<std::size_t>(len) + 4, "a sub-stream");
    const auto payload = r.take(len);
    const auto crc = r.get<std::uint32_t>();
    if (crc != crc32_of(data.subspan(start, 4 + static_cast<std::size_t>(len))))
      throw StreamError(K::stream_crc, "sub-stream " + std::to_string(stream_index) + " CRC mismatch");
    ++stream_index;
    return payload;
  };

  if (update) {
    const auto payload = next_payload();
    const FrequencyTable table = freq_from_pmf(prior->pmf().masses);
    const QuantGrid grid(*prior);
    RangeDecoder dec(payload);
    for (const auto& p : global.receiver()) {
      Tensor d(p.value.shape());
      for (double& v : d.values()) v = grid.value_of(dec.decode(table));
      out.delta_bar.push_back(std::move(d));
    }
    out.model_bits = update_bits(out.delta_bar, *prior);
  }
  out.theta_bar = update ? apply_update(global.receiver(), out.delta_bar) : values_of(global.receiver());

  const auto& cfg = global.config();
  const std::size_t ph = h.padded_height(), pw = h.padded_width();
  const Shape z2_shape{1, cfg.latent_channels, ph / CodecModel::kCodecStride, pw / CodecModel::kCodecStride};
  const Shape z1_shape{1, cfg.hyper_latent_channels, ph / CodecModel::kPadMultiple, pw / CodecModel::kPadMultiple};
  const auto [m1, s1] = bitstream::z1_params(out.theta_bar, z1_shape);
  for (std::uint32_t f = 0; f < h.frame_count; ++f) {
    const auto payload = next_payload();
    RangeDecoder dec(payload);
    FrameLatents z;
    z.z1 = bitstream::decode_tensor(dec, z1_shape, m1, s1);
    const auto [m2, s2] = bitstream::z2_params(out.theta_bar, z.z1);
    z.z2 = bitstream::decode_tensor(dec, z2_shape, m2, s2);
    out.latent_bits += bitstream::latent_bits(out.theta_bar, z.z1, z.z2);
    out.frames.push_back(bitstream::reconstruct_frame(out.theta_bar, z.z2, h.height, h.width));
    out.latents.push_back(std::move(z));
  }
  if (r.remaining() != 0) throw StreamError(K::malformed, std::to_string(r.remaining()) + " trailing bytes after the last sub-stream");
  return out;
}

}  // namespace iac
