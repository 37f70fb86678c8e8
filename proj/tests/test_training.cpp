#include <gtest/gtest.h>

#include <array>
#include <cmath>

#include "iac/training.hpp"

using namespace iac;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.channels = 8;
  c.latent_channels = 8;
  c.hyper_channels = 8;
  c.hyper_latent_channels = 4;
  return c;
}

Tensor smooth_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  const double fx = rng.uniform(0.05, 0.2), fy = rng.uniform(0.05, 0.2), ph = rng.uniform(0, 6);
  Tensor x(Shape{3, h, w});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        x[(c * h + i) * w + j] = 0.5 + 0.4 * std::sin(fx * j + fy * i + ph + c);
  return x;
}

std::vector<Frame> small_frames(std::size_t n, std::size_t h = 32, std::size_t w = 32) {
  std::vector<Tensor> ims;
  for (std::size_t i = 0; i < n; ++i) ims.push_back(smooth_image(h, w, 100 + i));
  return prepare_frames(ims);
}

FinetuneConfig quick(Regime r, std::size_t steps = 6) {
  FinetuneConfig c;
  c.regime = r;
  c.steps = steps;
  c.eval_interval = 3;
  c.beta = 1e-2;
  c.lr = r == Regime::encoder_only ? 1e-4 : 1e-3;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(Adam, FirstStepMovesBySignTimesLr) {
  Tensor p(Shape{3}, std::vector<double>{1.0, -2.0, 0.5});
  const Tensor g(Shape{3}, std::vector<double>{4.0, -0.01, 0.0});
  Adam adam(0.1);
  adam.step({&p}, {&g});
  EXPECT_NEAR(p[0], 0.9, 1e-8);
  EXPECT_NEAR(p[1], -1.9, 1e-5);
  EXPECT_EQ(p[2], 0.5);
}

TEST(Adam, MatchesReferenceRecurrence) {
  // Two steps with g = 1 then g = -1, PyTorch formulas evaluated by hand.
  Tensor p(Shape{1}, 0.0);
  Adam adam(0.01);
  const Tensor g1(Shape{1}, 1.0), g2(Shape{1}, -1.0);
  adam.step({&p}, {&g1});
  adam.step({&p}, {&g2});
  const double m = 0.9 * 0.1 - 0.1, v = 0.999 * 0.001 + 0.001;
  const double expected = -0.01 * (1.0 / (1.0 + 1e-8)) - 0.01 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.998001)) + 1e-8);
  EXPECT_NEAR(p[0], expected, 1e-15);
}

TEST(GlobalTraining, LearningRateDropsForLastTenth) {
  EXPECT_EQ(global_lr(0, 100, 1e-4), 1e-4);
  EXPECT_EQ(global_lr(89, 100, 1e-4), 1e-4);
  EXPECT_EQ(global_lr(90, 100, 1e-4), 1e-5);
  EXPECT_EQ(global_lr(99, 100, 1e-4), 1e-5);
}

TEST(GlobalTraining, CropsAndRuns) {
  std::vector<Tensor> ims{smooth_image(40, 50, 1), smooth_image(32, 32, 2), smooth_image(16, 16, 3)};
  GlobalTrainConfig cfg;
  cfg.model = small_config();
  cfg.crop = 32;
  cfg.batch = 2;
  cfg.steps = 10;
  cfg.lr = 1e-3;
  const auto r = train_global(ims, cfg);
  ASSERT_EQ(r.curve.size(), 10u);
  EXPECT_EQ(r.curve[8].lr, 1e-3);
  EXPECT_EQ(r.curve[9].lr, 1e-4);
  for (const auto& p : r.curve) EXPECT_TRUE(std::isfinite(p.loss));
  EXPECT_FALSE(r.model == CodecModel::create(cfg.model, cfg.seed));
  cfg.crop = 48;
  EXPECT_THROW(train_global(ims, cfg), std::invalid_argument);
}

TEST(Losses, RdmReducesToRdWithoutModelTerm) {
  const auto m = CodecModel::create(small_config(), 4);
  const auto frames = small_frames(1);
  const SpikeSlabPrior prior(0.05, 0.005, 1000.0);
  auto run = [&](bool mrl) {
    Tape tape;
    const auto tx = codec::bind(tape, m.transmitter(), false);
    std::vector<Var> delta;
    for (const auto& p : m.receiver()) delta.push_back(tape.leaf(Tensor(p.value.shape())));
    Rng rng(8);
    RdmOptions opt{1e-2, true, mrl, frames[0].pixels()};
    const auto r = rdm_loss(tape, tx, m.receiver(), delta, frames[0], prior, opt, rng);
    return std::array<double, 3>{r.loss.value()[0], r.rd.loss.value()[0], r.model_bits};
  };
  const auto a = run(false), b = run(true);
  EXPECT_EQ(a[0], a[1]);
  const double n = static_cast<double>(m.receiver_parameter_count());
  // Continuous M at delta = 0 is -log2 of the density, per parameter.
  const double m0 = n * -std::log2(prior.density(0.0));
  EXPECT_NEAR(b[2], m0, 1e-6 * std::fabs(m0));
  EXPECT_NEAR(b[0] - a[0], 1e-2 * b[2] / frames[0].pixels(), 1e-9);
}

TEST(Losses, DeltaShapeMismatchIsReported) {
  const auto m = CodecModel::create(small_config(), 4);
  Tape tape;
  std::vector<Var> delta;
  for (const auto& p : m.receiver()) delta.push_back(tape.leaf(Tensor(p.value.shape())));
  delta[3] = tape.leaf(Tensor(Shape{2}));
  EXPECT_THROW(offset_receiver(tape, m.receiver(), delta, nullptr), std::invalid_argument);
}

TEST(Evaluation, ZeroUpdateStepMatchesGlobalModel) {
  const auto m = CodecModel::create(small_config(), 5);
  const auto frames = small_frames(2);
  const SpikeSlabPrior prior(0.05, 0.005, 1000.0);
  const auto global = evaluate_instance(m.transmitter(), m.receiver(), {}, frames, 1e-2, prior);
  const auto zero = evaluate_instance(m.transmitter(), m.receiver(), zero_update(m.receiver()), frames, 1e-2, prior);
  EXPECT_EQ(zero.rd.rd, global.rd.rd);
  EXPECT_EQ(zero.model_bpp, zero.zero_model_bpp);
  EXPECT_EQ(zero.rdm, global.rd.rd + 1e-2 * global.zero_model_bpp);
  EXPECT_EQ(zero.nonzero, 0u);
  EXPECT_GT(global.rd.psnr, 0.0);
}

TEST(Evaluation, CropsPaddingAndClamps) {
  const auto m = CodecModel::create(small_config(), 6);
  const auto frames = small_frames(1, 20, 30);
  EXPECT_EQ(frames[0].padded.shape(), (Shape{1, 3, 32, 32}));
  const auto e = evaluate_frame(m.transmitter(), values_of(m.receiver()), frames[0]);
  EXPECT_EQ(e.pixels, 600u);
  EXPECT_EQ(e.values, 1800u);
  // Every reconstructed value is clamped to [0,1] and targets lie in [0.1,0.9].
  EXPECT_LE(e.squared_error, 1800 * 0.81);
}

TEST(Finetune, FullModelKeepsGlobalAndRecordsSchedule) {
  const auto m = CodecModel::create(small_config(), 7);
  const CodecModel before = m;
  const auto frames = small_frames(2);
  const auto r = finetune(m, frames, quick(Regime::full_model, 7));
  EXPECT_TRUE(m == before);
  ASSERT_EQ(r.evals.size(), 4u);  // steps 0, 3, 6, 7
  EXPECT_EQ(r.evals[0].step, 0u);
  EXPECT_EQ(r.evals[1].step, 3u);
  EXPECT_EQ(r.evals[3].step, 7u);
  EXPECT_EQ(r.train_loss.size(), 7u);
  EXPECT_EQ(r.config.selection_key(), SelectionKey::rdm);
  const auto& best = r.best_snapshot();
  for (const auto& e : r.evals) EXPECT_LE(best.key, e.quantized.rdm);
  // Step 0 is the global model plus the all-zero update.
  const SpikeSlabPrior prior = quick(Regime::full_model).prior.make();
  const auto g = evaluate_instance(m.transmitter(), m.receiver(), {}, frames, 1e-2, prior);
  EXPECT_EQ(r.evals[0].quantized.rdm, g.rd.rd + 1e-2 * g.zero_model_bpp);
  EXPECT_FALSE(best.delta_bar.empty());
  const QuantGrid grid(prior);
  for (const auto& t : best.delta_bar)
    for (double v : t.values()) EXPECT_TRUE(grid.on_grid(v));
}

TEST(Finetune, FullModelLowersObjectiveOnSingleFrame) {
  const auto m = CodecModel::create(small_config(), 8);
  const auto frames = small_frames(1);
  auto cfg = quick(Regime::full_model, 60);
  cfg.eval_interval = 60;
  const auto r = finetune(m, frames, cfg);
  EXPECT_LT(r.evals.back().quantized.rdm, r.evals.front().quantized.rdm);
}

TEST(Finetune, EncoderOnlySendsNoUpdate) {
  const auto m = CodecModel::create(small_config(), 9);
  const auto r = finetune(m, small_frames(2), quick(Regime::encoder_only));
  const auto& best = r.best_snapshot();
  EXPECT_EQ(r.config.selection_key(), SelectionKey::rd_quantized);
  EXPECT_EQ(best.eval.quantized.model_bpp, 0.0);
  EXPECT_TRUE(best.delta_bar.empty());
  EXPECT_EQ(best.eval.quantized.rdm, best.eval.quantized.rd.rd);
}

TEST(Finetune, DirectLatentOptimizesLatentsOnly) {
  const auto m = CodecModel::create(small_config(), 10);
  const auto frames = small_frames(2);
  const auto r = finetune(m, frames, quick(Regime::direct_latent, 40));
  const auto& best = r.best_snapshot();
  ASSERT_EQ(best.latents.size(), 2u);
  for (std::size_t i = 0; i < best.transmitter.size(); ++i) EXPECT_EQ(best.transmitter[i].value, m.transmitter()[i].value);
  EXPECT_LE(best.key, r.evals[0].quantized.rd.rd);
}

TEST(Finetune, DefaultLearningRates) {
  FinetuneConfig c;
  c.regime = Regime::full_model;
  EXPECT_EQ(c.learning_rate(), 1e-4);
  c.regime = Regime::encoder_only;
  EXPECT_EQ(c.learning_rate(), 1e-6);
  c.regime = Regime::direct_latent;
  c.beta = 3e-3;
  EXPECT_EQ(c.learning_rate(), 5e-4);
  c.beta = 1e-4;
  EXPECT_EQ(c.learning_rate(), 1e-3);
}

TEST(Finetune, SameSeedSameResult) {
  const auto m = CodecModel::create(small_config(), 11);
  const auto frames = small_frames(1);
  const auto a = finetune(m, frames, quick(Regime::full_model, 4));
  const auto b = finetune(m, frames, quick(Regime::full_model, 4));
  EXPECT_EQ(a.train_loss, b.train_loss);
  EXPECT_EQ(a.best_snapshot().delta_bar, b.best_snapshot().delta_bar);
}

TEST(Ablation, CasesShareRunsAndReportTheirOwnRates) {
  const auto m = CodecModel::create(small_config(), 12);
  const auto frames = small_frames(1);
  using C = AblationCase;
  const auto r = ablate(m, frames, quick(Regime::full_model, 4), {C::I, C::II, C::III, C::IV, C::V, C::VI});
  ASSERT_EQ(r.rows.size(), 6u);
  EXPECT_EQ(r.runs.size(), 4u);
  EXPECT_EQ(r.rows[4].model_bpp, 0.0);
  EXPECT_EQ(r.rows[5].model_bpp, 0.0);
  EXPECT_EQ(r.rows[2].rate_bpp, r.rows[4].rate_bpp);  // V reuses III's snapshot
  EXPECT_GT(r.rows[2].model_bpp, 0.0);
  for (const auto& row : r.rows) EXPECT_DOUBLE_EQ(row.total_rate(), row.rate_bpp + row.model_bpp);
  EXPECT_EQ(parse_case("IV"), C::IV);
  EXPECT_THROW(parse_case("VII"), std::invalid_argument);
}

TEST(Ablation, ThreadCountDoesNotChangeResults) {
  const auto m = CodecModel::create(small_config(), 13);
  const auto frames = small_frames(1);
  using C = AblationCase;
  const std::vector<C> cases{C::I, C::III, C::IV, C::VI};
  const auto a = ablate(m, frames, quick(Regime::full_model, 3), cases, 1);
  const auto b = ablate(m, frames, quick(Regime::full_model, 3), cases, 3);
  ASSERT_EQ(a.rows.size(), b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].loss, b.rows[i].loss);
    EXPECT_EQ(a.rows[i].rate_bpp, b.rows[i].rate_bpp);
    EXPECT_EQ(a.rows[i].nonzero, b.rows[i].nonzero);
  }
  EXPECT_EQ(a.runs[0].train_loss, b.runs[0].train_loss);
}

TEST(Selection, TwentyDistinctInstances) {
  std::vector<std::string> names;
  std::vector<double> losses;
  for (int i = 0; i < 20; ++i) {
    names.push_back("v" + std::string(i < 10 ? "0" : "") + std::to_string(i));
    losses.push_back(1.0 + i);
  }
  const auto s = select_representative_instances(names, {losses, losses}, 5);
  EXPECT_EQ(s.chosen, (std::vector<std::size_t>{3, 6, 9, 13, 16}));
  EXPECT_DOUBLE_EQ(s.percentile[19], 1.0);
  EXPECT_DOUBLE_EQ(s.targets[0], 1.0 / 6.0);
}

TEST(Selection, TiesShareRankAndBreakByName) {
  const std::vector<std::string> names{"b", "a", "c"};
  const auto s = select_representative_instances(names, {{1.0, 1.0, 1.0}}, 1);
  for (double p : s.percentile) EXPECT_DOUBLE_EQ(p, 0.5);
  EXPECT_EQ(s.chosen, std::vector<std::size_t>{1});
}

TEST(Selection, AveragesRanksOverBetas) {
  const std::vector<std::string> names{"x", "y", "z"};
  const auto s = select_representative_instances(names, {{1, 2, 3}, {3, 2, 1}}, 3);
  EXPECT_EQ(s.average_rank, (std::vector<double>{2, 2, 2}));
  EXPECT_THROW(select_representative_instances(names, {{1, 2}}, 1), std::invalid_argument);
  EXPECT_THROW(select_representative_instances(names, {{1, 2, 3}}, 4), std::invalid_argument);
}

TEST(TemporalAblation, EquispacedIndices) {
  EXPECT_EQ(equispaced_indices(10, 1), std::vector<std::size_t>{0});
  EXPECT_EQ(equispaced_indices(10, 5), (std::vector<std::size_t>{0, 2, 4, 6, 8}));
  EXPECT_EQ(equispaced_indices(7, 3), (std::vector<std::size_t>{0, 2, 4}));
  EXPECT_THROW(equispaced_indices(3, 4), std::invalid_argument);
  EXPECT_EQ(default_frame_counts(60), (std::vector<std::size_t>{1, 2, 5, 10, 25, 50}));
}

TEST(TemporalAblation, RowsPerFrameCountBetaAndRegime) {
  const auto m = CodecModel::create(small_config(), 13);
  const auto rows = temporal_ablation(m, small_frames(3), {1, 3}, {1e-2}, quick(Regime::full_model, 2));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].frames, 1u);
  EXPECT_EQ(rows[1].regime, Regime::encoder_only);
  EXPECT_GT(rows[0].best.model_bpp, rows[2].best.model_bpp);  // M-bar amortized over more pixels
}
