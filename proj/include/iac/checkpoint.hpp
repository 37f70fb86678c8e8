#pragma once

#include <optional>
#include <string>
#include <vector>

#include "iac/bytes.hpp"
#include "iac/codec_model.hpp"
#include "iac/training.hpp"

namespace iac {

/// Content hash of everything the receiver shares out-of-band: the architecture
/// config and every receiver tensor (name, shape, values) in parameter order.
inline Digest model_hash(const CodecModel& m) {
  ByteWriter w;
  w.put_string("iac-receiver-v1");
  const auto& c = m.config();
  for (std::size_t v : {c.image_channels, c.channels, c.latent_channels, c.hyper_channels, c.hyper_latent_channels, c.kernel})
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  for (const auto& p : m.receiver()) {
    w.put_string(p.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (double v : p.value.values()) w.put<double>(v);
  }
  Sha256 h;
  h.update(w.bytes());
  return h.finish();
}

/// Finetuning output needed to encode an instance: finetuned phi and, when the regime
/// sends one, the quantized receiver update delta-bar.
struct ModelUpdate {
  ParameterList transmitter;
  std::vector<Tensor> delta_bar;  // empty: no update is transmitted
  PriorConfig prior;
  double beta = 0.0;
  Digest base_hash{};  // hash of the global model the update applies to
};

namespace detail {

inline constexpr char kCheckpointMagic[4] = {'I', 'A', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void put_tensor(ByteWriter& w, const std::string& name, ParamGroup group, const Tensor& t) {
  w.put_string(name);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(group));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  for (double v : t.values()) w.put<double>(v);
}

inline Parameter get_tensor(ByteReader& r) {
  Parameter p;
  p.name = r.get_string();
  const auto g = r.get<std::uint8_t>();
  if (g > static_cast<std::uint8_t>(ParamGroup::decoder_gdn)) throw FormatError("checkpoint: bad group for " + p.name);
  p.group = static_cast<ParamGroup>(g);
  const auto rank = r.get<std::uint32_t>();
  if (rank > 8) throw FormatError("checkpoint: implausible rank for " + p.name);
  Shape s(rank);
  std::size_t n = 1;
  for (auto& d : s) {
    d = r.get<std::uint32_t>();
    n *= d;
  }
  if (n * 8 > r.remaining()) throw FormatError("checkpoint: truncated tensor " + p.name);
  p.value = Tensor(s);
  for (double& v : p.value.values()) v = r.get<double>();
  return p;
}

inline void begin(ByteWriter& w, const std::string& kind, const ModelConfig& c) {
  w.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(kCheckpointMagic), 4));
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string(kind);
  for (std::size_t v : {c.image_channels, c.channels, c.latent_channels, c.hyper_channels, c.hyper_latent_channels, c.kernel})
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
}

inline Bytes seal(ByteWriter& w) {
  w.put<std::uint32_t>(crc32_of(w.bytes()));
  return w.take();
}

/// Checks magic, version and trailing CRC; returns a reader positioned after the config.
inline ByteReader open(std::span<const std::uint8_t> data, const std::string& kind, ModelConfig& cfg) {
  if (data.size() < 12 || std::memcmp(data.data(), kCheckpointMagic, 4) != 0) throw FormatError("not an IACK checkpoint");
  const auto body = data.first(data.size() - 4);
  std::uint32_t crc;
  std::memcpy(&crc, data.data() + body.size(), 4);
  if (crc != crc32_of(body)) throw FormatError("checkpoint CRC mismatch (file corrupted)");
  ByteReader r(body);
  r.take(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto k = r.get_string();
  if (k != kind) throw FormatError("checkpoint holds a '" + k + "', expected a '" + kind + "'");
  for (std::size_t* v : {&cfg.image_channels, &cfg.channels, &cfg.latent_channels, &cfg.hyper_channels,
                         &cfg.hyper_latent_channels, &cfg.kernel})
    *v = r.get<std::uint32_t>();
  return r;
}

/// Copies tensors read from a file into `dst`, checking names and shapes.
inline void fill(ParameterList& dst, const std::vector<Parameter>& src, std::size_t offset, const std::string& prefix) {
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const Parameter& p = src.at(offset + i);
    if (p.name != prefix + dst[i].name || p.value.shape() != dst[i].value.shape())
      throw FormatError("checkpoint tensor '" + p.name + "' " + shape_str(p.value.shape()) + " does not match '" +
                        prefix + dst[i].name + "' " + shape_str(dst[i].value.shape()));
    dst[i].value = p.value;
  }
}

}  // namespace detail

inline Bytes serialize_model(const CodecModel& m) {
  ByteWriter w;
  detail::begin(w, "model", m.config());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.transmitter().size() + m.receiver().size()));
  for (const auto* list : {&m.transmitter(), &m.receiver()})
    for (const auto& p : *list) detail::put_tensor(w, p.name, p.group, p.value);
  return detail::seal(w);
}

inline CodecModel deserialize_model(std::span<const std::uint8_t> data) {
  ModelConfig cfg;
  ByteReader r = detail::open(data, "model", cfg);
  CodecModel m = CodecModel::create(cfg, 0);
  const auto n = r.get<std::uint32_t>();
  if (n != m.transmitter().size() + m.receiver().size()) throw FormatError("model checkpoint has wrong tensor count");
  std::vector<Parameter> ts;
  for (std::uint32_t i = 0; i < n; ++i) ts.push_back(detail::get_tensor(r));
  if (r.remaining() != 0) throw FormatError("model checkpoint has trailing bytes");
  detail::fill(m.transmitter(), ts, 0, "");
  detail::fill(m.receiver(), ts, m.transmitter().size(), "");
  return m;
}

inline Bytes serialize_update(const CodecModel& global, const ModelUpdate& u) {
  ByteWriter w;
  detail::begin(w, "update", global.config());
  w.put_bytes(u.base_hash);
  for (double v : {u.beta, u.prior.t, u.prior.sigma, u.prior.alpha}) w.put<double>(v);
  w.put<std::uint8_t>(u.delta_bar.empty() ? 0 : 1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(u.transmitter.size() + u.delta_bar.size()));
  for (const auto& p : u.transmitter) detail::put_tensor(w, p.name, p.group, p.value);
  for (std::size_t i = 0; i < u.delta_bar.size(); ++i)
    detail::put_tensor(w, "delta." + global.receiver()[i].name, global.receiver()[i].group, u.delta_bar[i]);
  return detail::seal(w);
}

/// Reads an update; `global` supplies the expected tensor layout.
inline ModelUpdate deserialize_update(std::span<const std::uint8_t> data, const CodecModel& global) {
  ModelConfig cfg;
  ByteReader r = detail::open(data, "update", cfg);
  if (!(cfg == global.config())) throw FormatError("update was made for a different architecture");
  ModelUpdate u;
  const auto h = r.take(32);
  std::copy(h.begin(), h.end(), u.base_hash.begin());
  u.beta = r.get<double>();
  u.prior.t = r.get<double>();
  u.prior.sigma = r.get<double>();
  u.prior.alpha = r.get<double>();
  const bool has_delta = r.get<std::uint8_t>() != 0;
  const auto n = r.get<std::uint32_t>();
  const std::size_t expect = global.transmitter().size() + (has_delta ? global.receiver().size() : 0);
  if (n != expect) throw FormatError("update checkpoint has wrong tensor count");
  std::vector<Parameter> ts;
  for (std::uint32_t i = 0; i < n; ++i) ts.push_back(detail::get_tensor(r));
  if (r.remaining() != 0) throw FormatError("update checkpoint has trailing bytes");
  u.transmitter = global.transmitter();
  detail::fill(u.transmitter, ts, 0, "");
  if (has_delta) {
    ParameterList d = global.receiver();
    detail::fill(d, ts, u.transmitter.size(), "delta.");
    for (auto& p : d) u.delta_bar.push_back(std::move(p.value));
  }
  return u;
}

}  // namespace iac
