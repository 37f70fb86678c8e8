#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <thread>

#include "iac/bitstream.hpp"
#include "iac/checkpoint.hpp"
#include "iac/cli_io.hpp"
#include "iac/training.hpp"

using namespace iac;

namespace {

// Seeds for generated textures live in separate ranges so training data never
// coincides with a synthetic instance.
constexpr std::uint64_t kTrainTextureBase = 1'000'000'000ull;

struct InstanceOpts {
  std::string instance;
  std::optional<double> fps_in, fps_out;

  void add(CLI::App* cmd, bool required = true) {
    auto* o = cmd->add_option("--instance", instance,
                              "Folder of PNG/PPM frames, or synthetic:SEED[:FRAMES[:SIZE]] for a generated video");
    if (required) o->required();
    cmd->add_option("--fps-in", fps_in, "Frame rate of the folder");
    cmd->add_option("--fps-out", fps_out, "Target frame rate; keeps every k-th frame with the closest achievable rate");
  }

  std::vector<Tensor> load() const { return load_frames(instance); }

  std::vector<Tensor> load_frames(const std::string& spec) const {
    if (spec.rfind("synthetic:", 0) == 0) {
      std::vector<std::string> parts;
      std::stringstream ss(spec.substr(10));
      for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
      if (parts.empty() || parts.size() > 3) throw std::invalid_argument("expected synthetic:SEED[:FRAMES[:SIZE]]");
      const auto seed = std::stoull(parts[0]);
      const std::size_t frames = parts.size() > 1 ? std::stoul(parts[1]) : 8;
      const std::size_t size = parts.size() > 2 ? std::stoul(parts[2]) : 64;
      return synthetic_instance(seed, frames, size, size);
    }
    if (fps_in.has_value() != fps_out.has_value()) throw std::invalid_argument("--fps-in and --fps-out go together");
    return load_instance(spec, fps_in, fps_out).frames;
  }
};

struct PriorOpts {
  std::optional<double> t, sigma, alpha;

  void add(CLI::App* cmd) {
    cmd->add_option("--t", t, "Update quantization bin width (default 0.005)");
    cmd->add_option("--sigma", sigma, "Slab standard deviation (default 0.05)");
    cmd->add_option("--alpha", alpha, "Spike weight (default 1000)");
  }

  PriorConfig resolve(PriorConfig base = {}) const {
    if (t) base.t = *t;
    if (sigma) base.sigma = *sigma;
    if (alpha) base.alpha = *alpha;
    return base;
  }
};

struct FinetuneOpts {
  double beta = 1e-3;
  std::size_t steps = 5000;
  double lr = 0.0;
  std::uint64_t seed = 0;
  std::string regime = "full_model";
  bool no_quant_aware = false, no_model_rate_loss = false;
  std::size_t eval_interval = 250;
  PriorOpts prior;

  void add(CLI::App* cmd, bool with_regime = true) {
    cmd->add_option("--beta", beta, "Rate-distortion tradeoff")->capture_default_str();
    cmd->add_option("--steps", steps, "Optimizer steps")->capture_default_str();
    cmd->add_option("--lr", lr, "Learning rate (0 = regime default)")->capture_default_str();
    cmd->add_option("--seed", seed, "Seed for quantization noise")->capture_default_str();
    if (with_regime)
      cmd->add_option("--regime", regime, "full_model | encoder_only | direct_latent")->capture_default_str();
    cmd->add_flag("--no-quant-aware", no_quant_aware, "Train delta without straight-through quantization");
    cmd->add_flag("--no-model-rate-loss", no_model_rate_loss, "Drop the model rate term from the loss");
    cmd->add_option("--eval-interval", eval_interval, "Steps between evaluations")->capture_default_str();
    prior.add(cmd);
  }

  FinetuneConfig config() const {
    FinetuneConfig c;
    c.regime = parse_regime(regime);
    c.beta = beta;
    c.steps = steps;
    c.lr = lr;
    c.seed = seed;
    c.quantization_aware = !no_quant_aware;
    c.model_rate_loss = !no_model_rate_loss;
    c.eval_interval = eval_interval;
    c.prior = prior.resolve();
    return c;
  }
};

std::size_t thread_cap() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("IAC_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v < 1) throw std::invalid_argument("IAC_THREADS must be a positive integer");
    n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
  }
  return n;
}

CodecModel load_model(const std::string& path) { return deserialize_model(read_file(path)); }

fs::path out_dir(const std::string& out) {
  fs::create_directories(out);
  return out;
}

std::vector<double> parse_doubles(const std::string& list) {
  std::vector<double> out;
  std::stringstream ss(list);
  for (std::string p; std::getline(ss, p, ',');) out.push_back(std::stod(p));
  return out;
}

/// "sigma=0.05,t=0.005,alpha=1000"
PriorConfig parse_prior(const std::string& spec, PriorConfig base) {
  std::stringstream ss(spec);
  for (std::string kv; std::getline(ss, kv, ',');) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--prior expects key=value pairs, got '" + kv + "'");
    const std::string k = kv.substr(0, eq);
    const double v = std::stod(kv.substr(eq + 1));
    if (k == "sigma" || k == "σ") base.sigma = v;
    else if (k == "t") base.t = v;
    else if (k == "alpha" || k == "α") base.alpha = v;
    else throw std::invalid_argument("--prior: unknown key '" + k + "'");
  }
  return base;
}

std::string eval_rows_csv(const FinetuneResult& r, std::size_t rx_params, std::size_t frames) {
  std::vector<ReportRow> rows;
  for (const auto& e : r.evals)
    rows.push_back(report_row("finetune", r.config.beta, regime_name(r.config.regime), e.step, e.quantized, rx_params, frames));
  return report_csv(rows);
}

// ---------------------------------------------------------------------------

struct TrainCmd {
  std::vector<std::string> data;
  std::size_t synthetic = 0, texture_size = 96;
  GlobalTrainConfig cfg;
  std::string init, out;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("train", "Train a global model on random crops");
    c->add_option("--data", data, "Folder(s) of training images");
    c->add_option("--synthetic", synthetic, "Number of generated textures to train on");
    c->add_option("--texture-size", texture_size, "Side of generated textures")->capture_default_str();
    c->add_option("--beta", cfg.beta, "Rate-distortion tradeoff")->capture_default_str();
    c->add_option("--steps", cfg.steps, "Optimizer steps")->capture_default_str();
    c->add_option("--lr", cfg.lr, "Base learning rate (divided by 10 for the last 10% of steps)")->capture_default_str();
    c->add_option("--seed", cfg.seed, "Seed for initialization, crops and noise")->capture_default_str();
    c->add_option("--crop", cfg.crop, "Crop side")->capture_default_str();
    c->add_option("--batch", cfg.batch, "Crops per step")->capture_default_str();
    c->add_option("--init", init, "Continue from this model checkpoint");
    c->add_option("--out", out, "Output directory (model.ckpt, train.csv)")->required();
    c->callback([this] { run(); });
  }

  void run() {
    std::vector<Tensor> images;
    for (const auto& d : data)
      for (const auto& f : list_images(d)) images.push_back(read_image(f));
    for (std::size_t i = 0; i < synthetic; ++i)
      images.push_back(procedural_texture(kTrainTextureBase + cfg.seed * 100'000 + i, texture_size, texture_size));
    if (images.empty()) throw std::invalid_argument("train: give --data and/or --synthetic");
    std::optional<CodecModel> start;
    if (!init.empty()) start = load_model(init);
    const auto res = train_global(images, cfg, start ? &*start : nullptr);
    const auto dir = out_dir(out);
    write_file_atomic(dir / "model.ckpt", serialize_model(res.model));
    std::ostringstream os;
    os << "step,loss,R_bpp,D_mse,lr\n";
    for (const auto& p : res.curve)
      os << p.step << ',' << format_number(p.loss) << ',' << format_number(p.rate_bpp) << ',' << format_number(p.distortion)
         << ',' << format_number(p.lr) << '\n';
    write_text_atomic(dir / "train.csv", os.str());
    std::cout << "model_hash," << hex(model_hash(res.model)) << '\n';
  }
};

struct FinetuneCmd {
  InstanceOpts inst;
  FinetuneOpts opts;
  std::string model, out;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("finetune", "Finetune a global model on one instance");
    inst.add(c);
    c->add_option("--model", model, "Global model checkpoint")->required();
    opts.add(c);
    c->add_option("--out", out, "Output directory (update.ckpt, evals.csv, loss.csv, best.csv)")->required();
    c->callback([this] { run(); });
  }

  void run() {
    const CodecModel global = load_model(model);
    const auto images = inst.load();
    const auto frames = prepare_frames(images);
    const FinetuneConfig cfg = opts.config();
    const FinetuneResult res = finetune(global, frames, cfg);
    const Snapshot& best = res.best_snapshot();
    const auto dir = out_dir(out);
    const std::size_t rxp = global.receiver_parameter_count();

    if (cfg.regime == Regime::direct_latent) {
      std::cerr << "note: direct_latent optimizes latents only; no update checkpoint is written\n";
    } else {
      ModelUpdate u;
      u.transmitter = best.transmitter;
      if (cfg.regime == Regime::full_model) u.delta_bar = best.delta_bar;
      u.prior = cfg.prior;
      u.beta = cfg.beta;
      u.base_hash = model_hash(global);
      write_file_atomic(dir / "update.ckpt", serialize_update(global, u));
    }
    write_text_atomic(dir / "evals.csv", eval_rows_csv(res, rxp, frames.size()));
    std::ostringstream loss;
    loss << "step,loss\n";
    for (std::size_t i = 0; i < res.train_loss.size(); ++i) loss << i << ',' << format_number(res.train_loss[i]) << '\n';
    write_text_atomic(dir / "loss.csv", loss.str());
    const std::string summary =
        report_csv({report_row("finetune", cfg.beta, regime_name(cfg.regime), best.step, best.eval.quantized, rxp, frames.size())});
    write_text_atomic(dir / "best.csv", summary);
    std::cout << summary;
  }
};

struct EncodeCmd {
  InstanceOpts inst;
  PriorOpts prior;
  std::string model, delta, out;
  std::optional<double> beta;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("encode", "Encode an instance into a bitstream");
    inst.add(c);
    c->add_option("--model", model, "Global model checkpoint")->required();
    c->add_option("--delta", delta, "Update checkpoint from finetune (omit to code with the global model)");
    c->add_option("--beta", beta, "Recorded tradeoff (default: from --delta, else 1e-3)");
    prior.add(c);
    c->add_option("--out", out, "Bitstream file")->required();
    c->callback([this] { run(); });
  }

  void run() {
    const CodecModel global = load_model(model);
    const auto images = inst.load();
    ModelUpdate u;
    u.transmitter = global.transmitter();
    u.beta = 1e-3;
    if (!delta.empty()) {
      u = deserialize_update(read_file(delta), global);
      if (u.base_hash != model_hash(global)) throw std::invalid_argument("--delta was made for a different global model");
    }
    const PriorConfig pc = prior.resolve(u.prior);
    const EncodedInstance enc = encode_instance(prepare_frames(images), global, u.transmitter, u.delta_bar, pc, beta.value_or(u.beta));
    write_file_atomic(out, enc.bytes);
    std::cout << stream_metrics_csv(
        stream_metrics(enc.header, enc.latent_bits, enc.model_bits, enc.bytes.size(), enc.reconstructions, &images));
  }
};

struct DecodeCmd {
  std::string stream, model, out, format = "png";

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("decode", "Decode a bitstream into frames");
    c->add_option("stream", stream, "Bitstream file")->required();
    c->add_option("--model", model, "Global model checkpoint")->required();
    c->add_option("--out", out, "Output folder for frames")->required();
    c->add_option("--format", format, "png | ppm")->capture_default_str()->check(CLI::IsMember({"png", "ppm"}));
    c->callback([this] { run(); });
  }

  void run() {
    const CodecModel global = load_model(model);
    const Bytes data = read_file(stream);
    const DecodedInstance dec = decode_instance(data, global);
    save_frames(out, dec.frames, "." + format);
    std::cout << stream_metrics_csv(stream_metrics(dec.header, dec.latent_bits, dec.model_bits, data.size(), dec.frames, nullptr));
  }
};

struct EvalCmd {
  InstanceOpts ref;
  std::string stream, model, out;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("eval", "Decode a bitstream and report rate and distortion against reference frames");
    c->add_option("stream", stream, "Bitstream file")->required();
    c->add_option("--model", model, "Global model checkpoint")->required();
    c->add_option("--ref", ref.instance, "Reference frames (folder or synthetic:SEED[:FRAMES[:SIZE]])");
    c->add_option("--fps-in", ref.fps_in, "Frame rate of the reference folder");
    c->add_option("--fps-out", ref.fps_out, "Target frame rate used when encoding");
    c->add_option("--out", out, "Also write the CSV to this file");
    c->callback([this] { run(); });
  }

  void run() {
    const CodecModel global = load_model(model);
    const Bytes data = read_file(stream);
    const DecodedInstance dec = decode_instance(data, global);
    std::vector<Tensor> refs;
    if (!ref.instance.empty()) refs = ref.load();
    const std::string csv = stream_metrics_csv(
        stream_metrics(dec.header, dec.latent_bits, dec.model_bits, data.size(), dec.frames, ref.instance.empty() ? nullptr : &refs));
    if (!out.empty()) write_text_atomic(out, csv);
    std::cout << csv;
  }
};

struct AblateCmd {
  InstanceOpts inst;
  FinetuneOpts opts;
  std::string model, out, cases = "I,II,III,IV,V,VI";

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("ablate", "Run the quantization / model-rate ablation cases I..VI");
    inst.add(c);
    c->add_option("--model", model, "Global model checkpoint")->required();
    opts.add(c, false);
    c->add_option("--cases", cases, "Comma-separated cases")->capture_default_str();
    c->add_option("--out", out, "Output directory (ablation.csv)")->required();
    c->callback([this] { run(); });
  }

  void run() {
    const CodecModel global = load_model(model);
    const auto frames = prepare_frames(inst.load());
    std::vector<AblationCase> list;
    std::stringstream ss(cases);
    for (std::string p; std::getline(ss, p, ',');) list.push_back(parse_case(p));
    FinetuneConfig cfg = opts.config();
    const auto res = ablate(global, frames, cfg, list, thread_cap());
    const SpikeSlabPrior prior = cfg.prior.make();
    const double px = static_cast<double>(total_pixels(frames));
    const std::size_t rxp = global.receiver_parameter_count();
    std::vector<ReportRow> rows;
    for (const auto& a : res.rows) {
      ReportRow r;
      r.experiment = "ablation";
      r.beta = cfg.beta;
      r.label = case_name(a.which);
      r.step = a.step;
      r.rate_bpp = a.rate_bpp;
      r.model_bpp = a.model_bpp;
      r.zero_model_bpp = static_cast<double>(rxp) * prior.zero_update_bits() / px;
      r.distortion = a.distortion;
      r.psnr = a.psnr;
      r.model_bits = a.model_bpp * px;
      r.receiver_params = rxp;
      r.frames = frames.size();
      r.nonzero = a.nonzero;
      rows.push_back(r);
    }
    const std::string csv = report_csv(rows);
    write_text_atomic(out_dir(out) / "ablation.csv", csv);
    std::cout << csv;
  }
};

struct TemporalCmd {
  InstanceOpts inst;
  FinetuneOpts opts;
  std::string model, out, frame_counts, betas;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("temporal-ablate", "Finetune on growing equispaced frame subsets");
    inst.add(c);
    c->add_option("--model", model, "Global model checkpoint")->required();
    opts.add(c, false);
    c->add_option("--frames", frame_counts, "Comma-separated frame counts (default 1,2,5,10,25,... up to available)");
    c->add_option("--betas", betas, "Comma-separated tradeoffs (default: --beta)");
    c->add_option("--out", out, "Output directory (temporal.csv)")->required();
    c->callback([this] { run(); });
  }

  void run() {
    const CodecModel global = load_model(model);
    const auto frames = prepare_frames(inst.load());
    std::vector<std::size_t> fs_;
    if (frame_counts.empty()) fs_ = default_frame_counts(frames.size());
    else
      for (double v : parse_doubles(frame_counts)) fs_.push_back(static_cast<std::size_t>(v));
    const std::vector<double> bs = betas.empty() ? std::vector<double>{opts.beta} : parse_doubles(betas);
    const auto rows = temporal_ablation(global, frames, fs_, bs, opts.config());
    std::vector<ReportRow> out_rows;
    for (const auto& r : rows)
      out_rows.push_back(report_row("temporal_f" + std::to_string(r.frames), r.beta, regime_name(r.regime), r.step, r.best,
                                    global.receiver_parameter_count(), r.frames));
    const std::string csv = report_csv(out_rows);
    write_text_atomic(out_dir(out) / "temporal.csv", csv);
    std::cout << csv;
  }
};

struct SelectCmd {
  std::string pool, losses, out;
  std::vector<std::string> models;
  std::string betas;
  std::size_t n = 5;
  std::optional<double> fps_in, fps_out;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("select", "Pick representative instances at evenly spaced loss percentiles");
    c->add_option("--pool", pool, "Folder whose subfolders are instances");
    c->add_option("--losses", losses, "CSV with columns name,loss_1,...,loss_B instead of --pool/--model");
    c->add_option("--model", models, "Global model per tradeoff (repeat, same order as --betas)");
    c->add_option("--betas", betas, "Comma-separated tradeoffs matching --model");
    c->add_option("--n", n, "Instances to select")->capture_default_str();
    c->add_option("--fps-in", fps_in, "Frame rate of the instance folders");
    c->add_option("--fps-out", fps_out, "Target frame rate");
    c->add_option("--out", out, "Output directory (losses.csv, selection.csv)")->required();
    c->callback([this] { run(); });
  }

  void run() {
    std::vector<std::string> names;
    std::vector<std::vector<double>> per_beta;
    if (!losses.empty()) {
      std::ifstream in(losses);
      if (!in) throw std::runtime_error("cannot open " + losses);
      std::string line;
      std::getline(in, line);  // header
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        names.push_back(cell);
        std::size_t b = 0;
        for (; std::getline(ss, cell, ','); ++b) {
          if (per_beta.size() <= b) per_beta.resize(b + 1);
          per_beta[b].push_back(std::stod(cell));
        }
      }
    } else {
      if (pool.empty() || models.empty()) throw std::invalid_argument("select: give --losses, or --pool with --model");
      const auto bs = parse_doubles(betas);
      if (bs.size() != models.size()) throw std::invalid_argument("select: one --betas entry per --model");
      std::vector<CodecModel> ms;
      for (const auto& m : models) ms.push_back(load_model(m));
      std::vector<fs::path> dirs;
      for (const auto& e : fs::directory_iterator(pool))
        if (e.is_directory()) dirs.push_back(e.path());
      std::sort(dirs.begin(), dirs.end());
      std::vector<std::vector<Frame>> instances;
      for (const auto& d : dirs) {
        names.push_back(d.filename().string());
        instances.push_back(prepare_frames(load_instance(d, fps_in, fps_out).frames));
      }
      per_beta = instance_rd_losses(ms, bs, instances);
    }
    const Selection s = select_representative_instances(names, per_beta, n);
    const auto dir = out_dir(out);
    std::ostringstream lc;
    lc << "name";
    for (std::size_t b = 0; b < per_beta.size(); ++b) lc << ",loss_" << b + 1;
    lc << ",average_rank,percentile\n";
    for (std::size_t i = 0; i < names.size(); ++i) {
      lc << names[i];
      for (const auto& row : per_beta) lc << ',' << format_number(row[i]);
      lc << ',' << format_number(s.average_rank[i]) << ',' << format_number(s.percentile[i]) << '\n';
    }
    write_text_atomic(dir / "losses.csv", lc.str());
    std::ostringstream sc;
    sc << "target,name,index,percentile\n";
    for (std::size_t k = 0; k < s.chosen.size(); ++k)
      sc << format_number(s.targets[k]) << ',' << names[s.chosen[k]] << ',' << s.chosen[k] << ','
         << format_number(s.percentile[s.chosen[k]]) << '\n';
    write_text_atomic(dir / "selection.csv", sc.str());
    std::cout << sc.str();
  }
};

struct HistogramCmd {
  std::string update, model, prior_spec, out;
  PriorOpts prior;
  std::size_t pixels = 0;
  InstanceOpts inst;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("report-histograms", "Histogram the quantized update per parameter group");
    c->add_option("update", update, "Update checkpoint from finetune")->required();
    c->add_option("--model", model, "Global model checkpoint the update applies to")->required();
    c->add_option("--prior", prior_spec, "Override the prior, e.g. sigma=0.05,t=0.005,alpha=1000");
    prior.add(c);
    c->add_option("--pixels", pixels, "Instance pixel count for bpp columns");
    inst.add(c, false);
    c->add_option("--out", out, "Output directory (histograms.csv, summary.csv)")->required();
    c->callback([this] { run(); });
  }

  void run() {
    const CodecModel global = load_model(model);
    const ModelUpdate u = deserialize_update(read_file(update), global);
    if (u.delta_bar.empty()) throw std::invalid_argument("update checkpoint carries no receiver update");
    PriorConfig pc = u.prior;
    if (!prior_spec.empty()) pc = parse_prior(prior_spec, pc);
    pc = prior.resolve(pc);
    const SpikeSlabPrior sp = pc.make();
    // Re-quantize when the prior was overridden with a different bin width.
    std::vector<Tensor> delta = u.delta_bar;
    const QuantGrid grid(sp);
    for (auto& t : delta)
      for (double& v : t.values()) v = grid.quantize(v);
    std::size_t px = pixels;
    if (!inst.instance.empty()) px = total_pixels(prepare_frames(inst.load()));
    const auto h = update_histograms(global.receiver(), delta, sp, px);
    const auto dir = out_dir(out);
    write_text_atomic(dir / "histograms.csv", histogram_csv(h, sp));
    const std::string summary = histogram_summary_csv(h);
    write_text_atomic(dir / "summary.csv", summary);
    std::cout << summary;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instance-adaptive video compression: train, finetune, code and analyze"};
  app.require_subcommand(1);
  TrainCmd train;
  FinetuneCmd finetune_cmd;
  EncodeCmd encode;
  DecodeCmd decode;
  EvalCmd eval;
  AblateCmd ablate_cmd;
  TemporalCmd temporal;
  SelectCmd select;
  HistogramCmd hist;
  train.add(app);
  finetune_cmd.add(app);
  encode.add(app);
  decode.add(app);
  eval.add(app);
  ablate_cmd.add(app);
  temporal.add(app);
  select.add(app);
  hist.add(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const StreamError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
