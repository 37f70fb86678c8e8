#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>

#include "iac/bitstream.hpp"
#include "iac/bytes.hpp"
#include "iac/codec_model.hpp"
#include "iac/tensor.hpp"
#include "iac/training.hpp"
#include "iac/update_prior.hpp"
#include "iac/update_quantizer.hpp"

namespace iac {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Images: 8-bit RGB, stored as [3,H,W] in [0,1]

inline Tensor image_from_rgb8(const std::vector<std::uint8_t>& rgb, std::size_t h, std::size_t w) {
  Tensor x(Shape{3, h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t c = 0; c < 3; ++c) x[(c * h + i) * w + j] = rgb[(i * w + j) * 3 + c] / 255.0;
  return x;
}

inline std::vector<std::uint8_t> rgb8_from_image(const Tensor& x) {
  const std::size_t h = x.dim(1), w = x.dim(2);
  std::vector<std::uint8_t> rgb(h * w * 3);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t c = 0; c < 3; ++c)
        rgb[(i * w + j) * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(x[(c * h + i) * w + j], 0.0, 1.0) * 255.0));
  return rgb;
}

namespace detail {

inline std::string next_ppm_token(std::istream& in) {
  std::string tok;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (!std::isspace(static_cast<unsigned char>(ch))) {
      tok += ch;
      break;
    }
  }
  while (in.get(ch) && !std::isspace(static_cast<unsigned char>(ch))) tok += ch;
  return tok;
}

}  // namespace detail

/// Binary PPM (P6) with maxval 255.
inline Tensor read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  if (detail::next_ppm_token(in) != "P6") throw std::runtime_error(path.string() + ": only binary PPM (P6) is supported");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(detail::next_ppm_token(in));
    h = std::stoul(detail::next_ppm_token(in));
    maxval = std::stoul(detail::next_ppm_token(in));
  } catch (const std::exception&) {
    throw std::runtime_error(path.string() + ": malformed PPM header");
  }
  if (maxval != 255) throw std::runtime_error(path.string() + ": only 8-bit PPM (maxval 255) is supported");
  if (w == 0 || h == 0) throw std::runtime_error(path.string() + ": empty image");
  std::vector<std::uint8_t> rgb(w * h * 3);
  in.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(rgb.size())) throw std::runtime_error(path.string() + ": truncated PPM data");
  return image_from_rgb8(rgb, h, w);
}

inline void write_ppm(const fs::path& path, const Tensor& x) {
  std::ostringstream os;
  os << "P6\n" << x.dim(2) << ' ' << x.dim(1) << "\n255\n";
  std::string s = os.str();
  const auto rgb = rgb8_from_image(x);
  s.append(reinterpret_cast<const char*>(rgb.data()), rgb.size());
  write_text_atomic(path, s);
}

/// 8-bit PNG; gray, palette and alpha inputs are converted to RGB.
inline Tensor read_png(const fs::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str()))
    throw std::runtime_error(path.string() + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, rgb.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw std::runtime_error(path.string() + ": " + msg);
  }
  return image_from_rgb8(rgb, img.height, img.width);
}

inline void write_png(const fs::path& path, const Tensor& x) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(x.dim(2));
  img.height = static_cast<png_uint_32>(x.dim(1));
  img.format = PNG_FORMAT_RGB;
  const auto rgb = rgb8_from_image(x);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, rgb.data(), 0, nullptr))
    throw std::runtime_error("PNG encode failed: " + std::string(img.message));
  Bytes out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, rgb.data(), 0, nullptr))
    throw std::runtime_error("PNG encode failed: " + std::string(img.message));
  out.resize(size);
  write_file_atomic(path, out);
}

inline bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".ppm";
}

inline Tensor read_image(const fs::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return read_png(path);
  if (ext == ".ppm") return read_ppm(path);
  throw std::runtime_error(path.string() + ": unsupported image format (PNG or PPM expected)");
}

inline void write_image(const fs::path& path, const Tensor& x) {
  if (path.extension() == ".ppm") write_ppm(path, x);
  else write_png(path, x);
}

// ---------------------------------------------------------------------------
// Instances

/// Subsampling step k >= 1 minimizing |source / k - target|; ties go to the smaller k.
inline std::size_t subsample_step(double source_fps, double target_fps) {
  if (!(source_fps > 0) || !(target_fps > 0)) throw std::invalid_argument("frame rates must be positive");
  std::size_t best = 1;
  double err = std::fabs(source_fps - target_fps);
  const auto limit = static_cast<std::size_t>(std::ceil(source_fps / target_fps)) + 1;
  for (std::size_t k = 2; k <= limit; ++k) {
    const double e = std::fabs(source_fps / static_cast<double>(k) - target_fps);
    if (e < err) {
      err = e;
      best = k;
    }
  }
  return best;
}

struct InstanceSet {
  std::string name;
  fs::path folder;
  std::vector<fs::path> files;  // kept frames, lexicographic order
  std::vector<Tensor> frames;   // [3,H,W] in [0,1]
  std::optional<double> source_fps, target_fps;
  std::size_t step = 1;

  std::size_t height() const { return frames.empty() ? 0 : frames[0].dim(1); }
  std::size_t width() const { return frames.empty() ? 0 : frames[0].dim(2); }
};

inline std::vector<fs::path> list_images(const fs::path& folder) {
  if (!fs::is_directory(folder)) throw std::runtime_error(folder.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(folder))
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end(), [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });
  return files;
}

/// Loads a folder of frames, keeping every k-th (k from subsample_step) when both rates are given.
inline InstanceSet load_instance(const fs::path& folder, std::optional<double> source_fps = std::nullopt,
                                 std::optional<double> target_fps = std::nullopt) {
  InstanceSet s;
  s.folder = folder;
  s.name = folder.filename().string();
  if (s.name.empty()) s.name = folder.parent_path().filename().string();
  s.source_fps = source_fps;
  s.target_fps = target_fps;
  if (source_fps && target_fps) s.step = subsample_step(*source_fps, *target_fps);
  const auto all = list_images(folder);
  if (all.empty()) throw std::runtime_error(folder.string() + " contains no PNG or PPM frames");
  for (std::size_t i = 0; i < all.size(); i += s.step) {
    Tensor x = read_image(all[i]);
    if (!s.frames.empty() && x.shape() != s.frames[0].shape())
      throw std::runtime_error(all[i].string() + " is " + shape_str(x.shape()) + " but earlier frames are " +
                               shape_str(s.frames[0].shape()) + "; all frames must share dimensions");
    s.files.push_back(all[i]);
    s.frames.push_back(std::move(x));
  }
  return s;
}

inline void save_frames(const fs::path& folder, const std::vector<Tensor>& frames, const std::string& ext = ".png") {
  fs::create_directories(folder);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%05zu", i);
    write_image(folder / (std::string(name) + ext), frames[i]);
  }
}

// ---------------------------------------------------------------------------
// Synthetic procedural textures

/// Smooth, seeded texture with oriented gratings, value noise and soft discs; `time`
/// translates every component along its own velocity so consecutive frames look like video.
inline Tensor procedural_texture(std::uint64_t seed, std::size_t h, std::size_t w, double time = 0.0) {
  Rng rng(seed);
  struct Grating {
    double fx, fy, phase, vx, vy;
    double color[3];
  };
  std::vector<Grating> gratings(3);
  for (auto& g : gratings) {
    const double angle = rng.uniform(0, 2 * M_PI), freq = rng.uniform(0.04, 0.35);
    g = {freq * std::cos(angle), freq * std::sin(angle), rng.uniform(0, 2 * M_PI), rng.uniform(-1.5, 1.5),
         rng.uniform(-1.5, 1.5), {rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25)}};
  }
  // Value noise on a coarse lattice, bilinearly interpolated.
  const std::size_t cell = 4 + rng.below(12);
  const std::size_t gh = h / cell + 3, gw = w / cell + 3;
  std::vector<double> lattice(gh * gw * 3);
  for (double& v : lattice) v = rng.uniform(-0.2, 0.2);
  const double nvx = rng.uniform(-1, 1), nvy = rng.uniform(-1, 1);
  struct Disc {
    double cx, cy, r, vx, vy, color[3];
  };
  std::vector<Disc> discs(2 + rng.below(3));
  for (auto& d : discs)
    d = {rng.uniform(0, static_cast<double>(w)), rng.uniform(0, static_cast<double>(h)), rng.uniform(3, 12),
         rng.uniform(-2, 2), rng.uniform(-2, 2), {rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)}};
  double base[3];
  for (double& b : base) b = rng.uniform(0.3, 0.7);

  Tensor x(Shape{3, h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      double v[3] = {base[0], base[1], base[2]};
      for (const auto& g : gratings) {
        const double s = std::sin(g.fx * (j - g.vx * time) + g.fy * (i - g.vy * time) + g.phase);
        for (int c = 0; c < 3; ++c) v[c] += g.color[c] * s;
      }
      double ny = (i + nvy * time) / static_cast<double>(cell), nx = (j + nvx * time) / static_cast<double>(cell);
      ny = std::clamp(ny, 0.0, static_cast<double>(gh - 2));
      nx = std::clamp(nx, 0.0, static_cast<double>(gw - 2));
      const auto y0 = static_cast<std::size_t>(ny), x0 = static_cast<std::size_t>(nx);
      const double fy = ny - y0, fx = nx - x0;
      for (int c = 0; c < 3; ++c) {
        auto at = [&](std::size_t a, std::size_t b) { return lattice[(a * gw + b) * 3 + c]; };
        v[c] += (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) + fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
      }
      for (const auto& d : discs) {
        const double dx = j - (d.cx + d.vx * time), dy = i - (d.cy + d.vy * time);
        const double m = 1.0 / (1.0 + std::exp((std::sqrt(dx * dx + dy * dy) - d.r) * 1.5));
        for (int c = 0; c < 3; ++c) v[c] += d.color[c] * m;
      }
      for (int c = 0; c < 3; ++c) x[(c * h + i) * w + j] = std::clamp(v[c], 0.0, 1.0);
    }
  return x;
}

/// A synthetic "video": `frames` consecutive time steps of one texture.
inline std::vector<Tensor> synthetic_instance(std::uint64_t seed, std::size_t frames, std::size_t h, std::size_t w) {
  std::vector<Tensor> out;
  for (std::size_t t = 0; t < frames; ++t) out.push_back(procedural_texture(seed, h, w, static_cast<double>(t)));
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct ReportRow {
  std::string experiment;
  double beta = 0;
  std::string label;  // regime or ablation case
  std::size_t step = 0;
  double rate_bpp = 0;        // R
  double model_bpp = 0;       // M-bar
  double zero_model_bpp = 0;  // M-bar_0
  double distortion = 0;      // MSE
  double psnr = 0;
  double model_bits = 0;
  std::size_t receiver_params = 0;
  std::size_t frames = 0;
  std::size_t nonzero = 0;

  double bits_per_param() const { return receiver_params ? model_bits / static_cast<double>(receiver_params) : 0.0; }
  double kb_per_frame() const { return frames ? model_bits / 8.0 / 1000.0 / static_cast<double>(frames) : 0.0; }
  double total_rate() const { return rate_bpp + model_bpp; }
};

inline ReportRow report_row(const std::string& experiment, double beta, const std::string& label, std::size_t step,
                            const InstanceEval& e, std::size_t receiver_params, std::size_t frames) {
  ReportRow r;
  r.experiment = experiment;
  r.beta = beta;
  r.label = label;
  r.step = step;
  r.rate_bpp = e.rd.rate_bpp;
  r.model_bpp = e.model_bpp;
  r.zero_model_bpp = e.zero_model_bpp;
  r.distortion = e.rd.distortion;
  r.psnr = e.rd.psnr;
  r.model_bits = e.model_bits;
  r.receiver_params = receiver_params;
  r.frames = frames;
  r.nonzero = e.nonzero;
  return r;
}

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  os << "experiment,beta,regime_or_case,step,R_bpp,Mbar_bpp,Mbar0_bpp,R_plus_Mbar_bpp,D_mse,PSNR_dB,bits_per_param,kB_per_frame,nonzero\n";
  for (const auto& r : rows)
    os << r.experiment << ',' << format_number(r.beta) << ',' << r.label << ',' << r.step << ',' << format_number(r.rate_bpp)
       << ',' << format_number(r.model_bpp) << ',' << format_number(r.zero_model_bpp) << ',' << format_number(r.total_rate())
       << ',' << format_number(r.distortion) << ',' << format_number(r.psnr) << ',' << format_number(r.bits_per_param())
       << ',' << format_number(r.kb_per_frame()) << ',' << r.nonzero << '\n';
  return os.str();
}

/// Rate and distortion of a coded instance. encode and eval both go through here, so a
/// decoded stream reproduces the encoder's numbers exactly.
struct StreamMetrics {
  std::size_t frames = 0, pixels = 0, file_bytes = 0;
  double beta = 0;
  double latent_bits = 0, model_bits = 0;
  double rate_bpp = 0, model_bpp = 0;
  std::optional<RdEval> quality;  // needs reference frames

  double total_bpp() const { return rate_bpp + model_bpp; }
  double file_bpp() const { return pixels ? 8.0 * static_cast<double>(file_bytes) / static_cast<double>(pixels) : 0.0; }
};

inline StreamMetrics stream_metrics(const StreamHeader& h, double latent_bits, double model_bits, std::size_t file_bytes,
                                    const std::vector<Tensor>& reconstructions, const std::vector<Tensor>* references) {
  StreamMetrics m;
  m.frames = h.frame_count;
  m.pixels = static_cast<std::size_t>(h.frame_count) * h.width * h.height;
  m.file_bytes = file_bytes;
  m.beta = h.beta;
  m.latent_bits = latent_bits;
  m.model_bits = model_bits;
  if (m.pixels) {
    m.rate_bpp = latent_bits / static_cast<double>(m.pixels);
    m.model_bpp = model_bits / static_cast<double>(m.pixels);
  }
  if (references) {
    if (references->size() != reconstructions.size())
      throw std::invalid_argument("reference has " + std::to_string(references->size()) + " frames, stream has " +
                                  std::to_string(reconstructions.size()));
    std::vector<FrameEval> fe;
    for (std::size_t f = 0; f < reconstructions.size(); ++f) {
      const Tensor& a = reconstructions[f];
      const Tensor& b = (*references)[f];
      if (a.shape() != b.shape())
        throw std::invalid_argument("reference frame " + std::to_string(f) + " is " + shape_str(b.shape()) +
                                    ", decoded frame is " + shape_str(a.shape()));
      FrameEval e;
      for (std::size_t i = 0; i < a.size(); ++i) e.squared_error += (a[i] - b[i]) * (a[i] - b[i]);
      e.pixels = a.dim(1) * a.dim(2);
      e.values = a.size();
      fe.push_back(e);
    }
    RdEval q = aggregate(fe, h.beta);
    q.rate_bits = latent_bits;
    q.rate_bpp = m.rate_bpp;
    q.rd = h.beta * q.rate_bpp + q.distortion;
    m.quality = q;
  }
  return m;
}

inline std::string stream_metrics_csv(const StreamMetrics& m) {
  std::ostringstream os;
  os << "frames,pixels,file_bytes,file_bpp,beta,R_bpp,Mbar_bpp,R_plus_Mbar_bpp,latent_bits,model_bits,D_mse,PSNR_dB,RDMbar\n";
  os << m.frames << ',' << m.pixels << ',' << m.file_bytes << ',' << format_number(m.file_bpp()) << ','
     << format_number(m.beta) << ',' << format_number(m.rate_bpp) << ',' << format_number(m.model_bpp) << ','
     << format_number(m.total_bpp()) << ',' << format_number(m.latent_bits) << ',' << format_number(m.model_bits) << ',';
  if (m.quality)
    os << format_number(m.quality->distortion) << ',' << format_number(m.quality->psnr) << ','
       << format_number(m.quality->rd + m.beta * m.model_bpp);
  else
    os << ",,";
  os << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Update histograms, grouped like the decoder's parameter families

enum class HistogramGroup { decoder_weights, decoder_biases, igdn, hyper_decoder, hyperprior };

inline const char* histogram_group_name(HistogramGroup g) {
  switch (g) {
    case HistogramGroup::decoder_weights: return "decoder_weights";
    case HistogramGroup::decoder_biases: return "decoder_biases";
    case HistogramGroup::igdn: return "igdn";
    case HistogramGroup::hyper_decoder: return "hyper_decoder";
    case HistogramGroup::hyperprior: return "hyperprior";
  }
  return "?";
}

inline HistogramGroup histogram_group(ParamGroup g) {
  switch (g) {
    case ParamGroup::decoder_weight: return HistogramGroup::decoder_weights;
    case ParamGroup::decoder_bias: return HistogramGroup::decoder_biases;
    case ParamGroup::decoder_gdn: return HistogramGroup::igdn;
    case ParamGroup::hyper_decoder: return HistogramGroup::hyper_decoder;
    case ParamGroup::hyperprior: return HistogramGroup::hyperprior;
    default: break;
  }
  throw std::invalid_argument("histogram_group: transmitter parameters carry no update");
}

struct GroupHistogram {
  HistogramGroup group;
  std::vector<std::uint64_t> counts;  // one per grid bin
  std::size_t params = 0;
  std::size_t nonzero = 0;
  double bits = 0;
};

struct UpdateHistograms {
  std::vector<GroupHistogram> groups;
  double total_bits = 0;  // M-bar of the whole update
  std::size_t pixels = 0;  // 0 when unknown; bpp columns are then omitted
};

inline UpdateHistograms update_histograms(const ParameterList& receiver, const std::vector<Tensor>& delta_bar,
                                          const SpikeSlabPrior& prior, std::size_t pixels = 0) {
  if (delta_bar.size() != receiver.size()) throw std::invalid_argument("update_histograms: update does not match receiver");
  UpdateHistograms out;
  out.pixels = pixels;
  const std::size_t bins = static_cast<std::size_t>(prior.bin_count());
  for (int g = 0; g <= static_cast<int>(HistogramGroup::hyperprior); ++g)
    out.groups.push_back({static_cast<HistogramGroup>(g), std::vector<std::uint64_t>(bins, 0), 0, 0, 0.0});
  for (std::size_t k = 0; k < receiver.size(); ++k) {
    auto& h = out.groups[static_cast<std::size_t>(histogram_group(receiver[k].group))];
    for (double v : delta_bar[k].values()) {
      ++h.counts[prior.symbol_of(v)];
      ++h.params;
      h.nonzero += v != 0.0;
    }
  }
  for (auto& h : out.groups) h.bits = prior.rate_from_counts(h.counts);
  out.total_bits = update_bits(delta_bar, prior);
  return out;
}

/// Long-format histogram CSV: one row per (group, bin).
inline std::string histogram_csv(const UpdateHistograms& u, const SpikeSlabPrior& prior) {
  std::ostringstream os;
  os << "group,bin,level,value,count\n";
  for (const auto& h : u.groups)
    for (std::size_t b = 0; b < h.counts.size(); ++b)
      os << histogram_group_name(h.group) << ',' << b << ',' << static_cast<long>(b) - prior.half_bins() << ','
         << format_number(static_cast<double>(static_cast<long>(b) - prior.half_bins()) * prior.bin_width()) << ',' << h.counts[b] << '\n';
  return os.str();
}

inline std::string histogram_summary_csv(const UpdateHistograms& u) {
  std::ostringstream os;
  os << "group,params,nonzero,bits,bits_per_param,bpp\n";
  auto line = [&](const std::string& name, std::size_t params, std::size_t nonzero, double bits) {
    os << name << ',' << params << ',' << nonzero << ',' << format_number(bits) << ','
       << format_number(params ? bits / static_cast<double>(params) : 0.0) << ','
       << (u.pixels ? format_number(bits / static_cast<double>(u.pixels)) : std::string()) << '\n';
  };
  std::size_t params = 0, nonzero = 0;
  for (const auto& h : u.groups) {
    line(histogram_group_name(h.group), h.params, h.nonzero, h.bits);
    params += h.params;
    nonzero += h.nonzero;
  }
  line("total", params, nonzero, u.total_bits);
  return os.str();
}

}  // namespace iac
