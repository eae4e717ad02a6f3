#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_util.hpp"
#include "tvae/error.hpp"
#include "tvae/trainer.hpp"

namespace {

using namespace tvae;
using namespace tvae::trainer;
using tvae::testing::random_sentences;

namespace fs = std::filesystem;

model::ModelConfig small_config() {
  model::ModelConfig c;
  c.vocab_size = 16;
  c.hidden = 16;
  c.heads = 2;
  c.head_dim = 8;
  c.ff_dim = 32;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.latent_dim = 4;
  c.max_seq_len = 10;
  return c;
}

std::vector<data::Sequence> corpus(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return random_sentences(n, 2, 7, 16, rng);
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("tvae_trainer_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_parameters(const Model& a, const Model& b) {
  auto ib = b.parameters().begin();
  for (const auto& [name, p] : a.parameters()) {
    if (name != ib->first) return false;
    const auto x = p.data(), y = ib->second.data();
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
    ++ib;
  }
  return true;
}

std::vector<float> snapshot(const Model& m, const std::string& name) {
  const auto d = m.parameters().at(name).data();
  return {d.begin(), d.end()};
}

PhaseConfig quick_phase2(std::size_t epochs = 2) {
  PhaseConfig c = PhaseConfig::phase2_defaults();
  c.epochs = epochs;
  c.batch_size = 8;
  c.max_len = 10;
  c.seed = 7;
  return c;
}

RunOptions quiet() {
  RunOptions o;
  o.eval.max_len = 10;
  o.eval.batch_size = 16;
  return o;
}

// ---- AdamW ---------------------------------------------------------------------

model::ParameterMap<double> scalar_params(std::vector<double> w, std::vector<double> g) {
  model::ParameterMap<double> params;
  const std::size_t n = w.size();
  diff::Tensor<double> t({n}, std::move(w), true);
  std::copy(g.begin(), g.end(), t.mutable_grad().begin());
  params.add("w", t);
  return params;
}

TEST(AdamW, FirstStepMatchesClosedForm) {
  auto params = scalar_params({0.0}, {1.0});
  AdamW<double> opt;
  opt.step(params);
  // m_hat = 1, v_hat = 1: -lr * 1 / (1 + eps).
  EXPECT_NEAR(params.at("w")[0], -0.001 / 1.001, 1e-18);
  EXPECT_NEAR(params.at("w")[0], -0.000999000999001, 1e-15);
  EXPECT_EQ(opt.t(), 1u);
}

TEST(AdamW, QuadraticLossTwoStepsMatchHandDerivation) {
  // loss = 0.5 * a * (w - c)^2 per coordinate, weight decay on.
  const std::vector<double> a{2.0, 0.5, 3.0}, c{1.0, -2.0, 0.25};
  std::vector<double> w{0.3, 0.7, -1.1};
  AdamWConfig cfg;
  cfg.weight_decay = 0.1;
  cfg.lr = 0.01;
  AdamW<double> opt(cfg);
  model::ParameterMap<double> params;
  params.add("w", diff::Tensor<double>({3}, w, true));

  std::vector<double> m(3, 0.0), v(3, 0.0), expect = w;
  for (int t = 1; t <= 2; ++t) {
    auto& p = params.at("w");
    auto g = p.mutable_grad();
    for (std::size_t i = 0; i < 3; ++i) g[i] = a[i] * (p[i] - c[i]);
    for (std::size_t i = 0; i < 3; ++i) {
      const double gi = a[i] * (expect[i] - c[i]);
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.999 * v[i] + 0.001 * gi * gi;
      const double mhat = m[i] / (1 - std::pow(0.9, t)), vhat = v[i] / (1 - std::pow(0.999, t));
      expect[i] = expect[i] * (1 - 0.01 * 0.1) - 0.01 * mhat / (std::sqrt(vhat) + 1e-3);
    }
    opt.step(params);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(p[i], expect[i], 1e-7 * std::abs(expect[i]));
  }
}

TEST(AdamW, ZeroGradientZeroDecayLeavesParameters) {
  auto params = scalar_params({0.25, -3.5, 7.0}, {0.0, 0.0, 0.0});
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW<double> opt(cfg);
  for (int i = 0; i < 5; ++i) opt.step(params);
  EXPECT_EQ(params.at("w")[0], 0.25);
  EXPECT_EQ(params.at("w")[1], -3.5);
  EXPECT_EQ(params.at("w")[2], 7.0);
}

TEST(AdamW, FrozenParametersUntouched) {
  auto params = scalar_params({1.0}, {1.0});
  diff::Tensor<double> other({1}, {2.0}, true);
  other.mutable_grad()[0] = 1.0;
  params.add("frozen", other);
  AdamW<double> opt;
  opt.step(params, {"frozen"});
  EXPECT_EQ(params.at("frozen")[0], 2.0);
  EXPECT_NE(params.at("w")[0], 1.0);
  EXPECT_EQ(opt.first_moments().count("frozen"), 0u);
}

TEST(AdamW, NonFiniteGradientNamesParameterAndChangesNothing) {
  auto params = scalar_params({1.0}, {1.0});
  diff::Tensor<double> bad({2}, {2.0, 3.0}, true);
  bad.mutable_grad()[1] = std::nan("");
  params.add("encoder.bad", bad);
  AdamW<double> opt;
  try {
    opt.step(params);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.bad"), std::string::npos);
  }
  EXPECT_EQ(params.at("w")[0], 1.0);
  EXPECT_EQ(opt.t(), 0u);
}

TEST(AdamW, GlobalNormClipping) {
  auto params = scalar_params({0.0, 0.0}, {3.0, 4.0});
  AdamW<double> opt;
  opt.step(params, {}, 1.0);
  EXPECT_NEAR(params.at("w")[0], -0.001 * 0.6 / (0.6 + 1e-3), 1e-15);
  EXPECT_NEAR(params.at("w")[1], -0.001 * 0.8 / (0.8 + 1e-3), 1e-15);
  auto unclipped = scalar_params({0.0, 0.0}, {3.0, 4.0});
  AdamW<double> opt2;
  opt2.step(unclipped, {}, 10.0);
  EXPECT_NEAR(unclipped.at("w")[0], -0.001 * 3.0 / 3.001, 1e-15);
}

TEST(AdamW, RejectsBadConfig) {
  AdamWConfig cfg;
  cfg.lr = 0;
  EXPECT_THROW(AdamW<double>{cfg}, ConfigError);
  cfg = {};
  cfg.beta2 = 1.0;
  EXPECT_THROW(AdamW<double>{cfg}, ConfigError);
}

TEST(AdamW, HundredStepsBitIdentical) {
  auto train = [] {
    Model m(small_config(), 3);
    const auto data = corpus(16, 4);
    PhaseConfig cfg = quick_phase2(100);
    cfg.batch_size = 16;  // one step per epoch
    RunOptions o = quiet();
    o.validate_each_epoch = false;
    run_phase(m, data, {}, cfg, o);
    return m;
  };
  EXPECT_TRUE(same_parameters(train(), train()));
}

// ---- freeze --------------------------------------------------------------------------

TEST(Freeze, DecoderAndProjection) {
  const Model m(small_config(), 1);
  const auto names = freeze(m.parameters(), {"decoder.*", "w_proj"});
  std::size_t expected = 0;
  for (const auto& [name, p] : m.parameters()) {
    const bool dec = name.rfind("decoder.", 0) == 0 || name == "w_proj";
    expected += dec;
    EXPECT_EQ(names.count(name), dec ? 1u : 0u) << name;
  }
  EXPECT_EQ(names.size(), expected);
  EXPECT_TRUE(freeze(m.parameters(), {}).empty());
  EXPECT_THROW(freeze(m.parameters(), {"decoder.*", "w_porj"}), ConfigError);
}

// ---- phase config ----------------------------------------------------------------------

TEST(PhaseConfig, Defaults) {
  const auto p1 = PhaseConfig::phase1_defaults();
  const auto p2 = PhaseConfig::phase2_defaults();
  EXPECT_EQ(p1.epochs, 5u);
  EXPECT_EQ(p2.epochs, 3u);
  EXPECT_EQ(p1.loss.schedule.kind, objective::ScheduleKind::zero);
  EXPECT_EQ(p2.loss.schedule.kind, objective::ScheduleKind::linear);
  EXPECT_EQ(p2.loss.schedule.epochs, 50.0);
  EXPECT_EQ(p1.frozen, (std::vector<std::string>{"decoder.*", "w_proj"}));
  EXPECT_TRUE(p2.frozen.empty());
  EXPECT_FALSE(p1.deterministic_latent);
  EXPECT_EQ(p1.optimizer.lr, 1e-3);
  EXPECT_EQ(p1.optimizer.eps, 1e-3);
  p1.validate();
  p2.validate();
}

TEST(PhaseConfig, ValidationListsEveryProblem) {
  PhaseConfig c = PhaseConfig::phase1_defaults();
  c.loss.schedule.kind = objective::ScheduleKind::linear;
  c.epochs = 0;
  c.denoise = 1.0;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("zero KL schedule"), std::string::npos);
    EXPECT_NE(msg.find("epochs"), std::string::npos);
    EXPECT_NE(msg.find("denoise"), std::string::npos);
  }
}

// ---- run_phase ---------------------------------------------------------------------------

TEST(RunPhase, PhaseOneFreezesDecoderAndLogsZeroBeta) {
  Model m(small_config(), 5);
  const Model before = m.cast<float>();
  const auto train = corpus(40, 6), valid = corpus(20, 7);
  PhaseConfig cfg = PhaseConfig::phase1_defaults();
  cfg.epochs = 2;
  cfg.batch_size = 8;
  const TrainLog log = run_phase(m, train, valid, cfg, quiet());
  ASSERT_EQ(log.steps.size(), 10u);
  for (const auto& s : log.steps) {
    EXPECT_EQ(s.beta, 0.0);
    EXPECT_EQ(s.phase, 1);
    EXPECT_GT(s.kl_raw, 0.0);
  }
  bool encoder_moved = false;
  for (const auto& [name, p] : m.parameters()) {
    const bool frozen = name.rfind("decoder.", 0) == 0 || name == "w_proj";
    const bool same = snapshot(m, name) == snapshot(before, name);
    if (frozen) {
      EXPECT_TRUE(same) << name;
    }
    if (!frozen && !same) encoder_moved = true;
  }
  EXPECT_TRUE(encoder_moved);
  ASSERT_EQ(log.epochs.size(), 2u);
  EXPECT_GT(log.epochs[1].valid.kl, 0.0);
  EXPECT_EQ(log.epochs[1].step, 10u);
}

TEST(RunPhase, PhaseOneDecoderOutputsUnchangedForFixedLatent) {
  Model m(small_config(), 8);
  Rng rng(9);
  const auto z = tvae::testing::random_tensor<float>({3, 4}, rng);
  const auto batch = tvae::testing::make_batch({{5, 6, 7}, {8, 9}, {10, 11, 12, 13}});
  auto decode = [&] {
    diff::NoGradGuard ng;
    const auto out = m.decode(m.project_latent(z), batch.tgt_in, batch.tgt_mask);
    return std::vector<float>(out.data().begin(), out.data().end());
  };
  const auto before = decode();
  PhaseConfig cfg = PhaseConfig::phase1_defaults();
  cfg.epochs = 1;
  cfg.batch_size = 8;
  run_phase(m, corpus(40, 10), {}, cfg, quiet());
  EXPECT_EQ(decode(), before);
}

TEST(RunPhase, LinearBetaFollowsScheduleAndNeverDecreases) {
  Model m(small_config(), 11);
  const auto train = corpus(30, 12);
  PhaseConfig cfg = quick_phase2(3);
  cfg.loss.schedule.epochs = 2;  // reaches the cap inside the run
  PhaseTrainer t(m, train, {}, cfg, quiet());
  t.run();
  const auto& steps = t.log().steps;
  ASSERT_EQ(steps.size(), 12u);
  for (std::size_t i = 0; i < steps.size(); ++i) {
    EXPECT_EQ(steps[i].step, i);
    EXPECT_EQ(steps[i].beta, objective::kl_weight(cfg.loss.schedule, i, t.steps_per_epoch()));
    if (i) {
      EXPECT_GE(steps[i].beta, steps[i - 1].beta);
    }
  }
  EXPECT_EQ(steps.back().beta, 1.0);
}

TEST(RunPhase, LossHalvesWithinTwoHundredSteps) {
  const auto lines = data::synthetic_corpus(50, 14);
  const auto vocab = data::Vocab::build(lines, 0);
  const auto train = data::encode_corpus(lines, vocab);
  model::ModelConfig c = small_config();
  c.vocab_size = vocab.size();
  c.max_seq_len = 16;
  Model m(c, 13);
  PhaseConfig cfg = quick_phase2(40);
  cfg.batch_size = 10;
  cfg.max_len = 16;
  cfg.optimizer.lr = 3e-3;
  RunOptions o = quiet();
  o.validate_each_epoch = false;
  const auto log = run_phase(m, train, {}, cfg, o);
  ASSERT_EQ(log.steps.size(), 200u);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 5; ++i) first += log.steps[i].total;
  for (std::size_t i = 195; i < 200; ++i) last += log.steps[i].total;
  EXPECT_LE(last, 0.5 * first) << "first epoch " << first / 5 << ", last epoch " << last / 5;
}

TEST(RunPhase, MemorizedSequenceIsReconstructed) {
  model::ModelConfig c = small_config();
  c.latent_dim = 8;
  Model m(c, 15);
  const std::vector<data::Sequence> train{{4, 9, 12, 5, 7, 15}};
  PhaseConfig cfg = quick_phase2(300);
  cfg.loss.schedule.kind = objective::ScheduleKind::zero;
  cfg.deterministic_latent = true;
  cfg.batch_size = 1;
  cfg.optimizer.lr = 3e-3;
  RunOptions o = quiet();
  o.validate_each_epoch = false;
  run_phase(m, train, {}, cfg, o);
  const auto batch = tvae::testing::make_batch({train[0]});
  diff::NoGradGuard ng;
  const auto [mu, ls] = m.posterior(batch.src_ids, batch.src_mask);
  const auto out = m.generate(mu, 10);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0], train[0]);
}

TEST(RunPhase, DivergenceGuard) {
  Model m(small_config(), 16);
  for (auto& x : m.parameters().at("decoder.lm_head").mutable_data()) x = std::numeric_limits<float>::infinity();
  PhaseConfig cfg = quick_phase2(1);
  EXPECT_THROW(run_phase(m, corpus(10, 17), {}, cfg, quiet()), DivergenceError);
}

TEST(RunPhase, RejectsEmptyCorpus) {
  Model m(small_config(), 16);
  EXPECT_THROW(run_phase(m, {}, {}, quick_phase2(1), quiet()), ValueError);
}

TEST(RunPhase, TrainedModelImportanceWeightedBoundIsTighter) {
  const auto lines = data::synthetic_corpus(120, 40);
  const auto vocab = data::Vocab::build(lines, 0);
  const auto all = data::encode_corpus(lines, vocab);
  const std::vector<data::Sequence> train(all.begin(), all.begin() + 100), valid(all.begin() + 100, all.end());
  model::ModelConfig c = small_config();
  c.vocab_size = vocab.size();
  c.max_seq_len = 16;
  Model m(c, 41);
  PhaseConfig cfg = quick_phase2(15);
  cfg.batch_size = 10;
  cfg.max_len = 16;
  cfg.optimizer.lr = 3e-3;
  RunOptions o = quiet();
  o.validate_each_epoch = false;
  run_phase(m, train, {}, cfg, o);

  eval::EvalConfig ec;
  ec.max_len = 16;
  ec.ppl_mode = eval::PplMode::iw;
  ec.iw_samples = 50;
  const auto r = eval::full_report(m, valid, ec);
  EXPECT_LE(r.ppl_iw, r.ppl_elbo * 1.01) << "iw " << r.ppl_iw << " elbo " << r.ppl_elbo;
  EXPECT_GT(r.kl, 0.0);
}

// ---- two-phase ---------------------------------------------------------------------------

TEST(TwoPhase, RunsBothPhasesInOrder) {
  Model m(small_config(), 18);
  TwoPhaseConfig cfg;
  cfg.phase1.epochs = 1;
  cfg.phase1.batch_size = 8;
  cfg.phase2 = quick_phase2(2);
  const auto log = train_two_phase(m, corpus(24, 19), corpus(10, 20), cfg, quiet());
  ASSERT_EQ(log.steps.size(), 9u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(log.steps[i].phase, 1);
  for (std::size_t i = 3; i < 9; ++i) EXPECT_EQ(log.steps[i].phase, 2);
  EXPECT_EQ(log.steps[3].step, 0u);  // the schedule restarts with phase 2
  ASSERT_EQ(log.epochs.size(), 3u);
  EXPECT_EQ(log.epochs[0].phase, 1);
}

TEST(TwoPhase, ZeroEpochPhaseOneIsPlainFinetuning) {
  const auto train = corpus(24, 21);
  Model a(small_config(), 22), b(small_config(), 22);
  TwoPhaseConfig cfg;
  cfg.phase1.epochs = 0;
  cfg.phase2 = quick_phase2(2);
  const auto log = train_two_phase(a, train, {}, cfg, quiet());
  const auto plain = run_phase(b, train, {}, cfg.phase2, quiet());
  EXPECT_EQ(log.steps.size(), plain.steps.size());
  EXPECT_TRUE(same_parameters(a, b));
}

// ---- checkpoints ----------------------------------------------------------------------------

TEST(Checkpoint, SaveLoadRoundTrip) {
  Model m(small_config(), 23);
  PhaseTrainer t(m, corpus(20, 24), corpus(8, 25), quick_phase2(1), quiet());
  t.run();
  const Checkpoint c = t.checkpoint();
  const auto dir = fresh_dir("roundtrip");
  save_checkpoint(dir / "a.ckpt", c);
  const Checkpoint d = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(d.model_config, c.model_config);
  EXPECT_EQ(d.step, c.step);
  EXPECT_EQ(d.epoch, 1u);
  EXPECT_EQ(d.sample_rng, c.sample_rng);
  EXPECT_EQ(d.epoch_data_rng, c.epoch_data_rng);
  EXPECT_EQ(d.optimizer_t, c.optimizer_t);
  ASSERT_TRUE(d.metrics.has_value());
  EXPECT_EQ(d.metrics->kl, c.metrics->kl);
  EXPECT_EQ(d.metrics->ppl, c.metrics->ppl);
  ASSERT_EQ(d.blobs.size(), c.blobs.size());
  for (std::size_t i = 0; i < c.blobs.size(); ++i) {
    EXPECT_EQ(d.blobs[i].name, c.blobs[i].name);
    EXPECT_EQ(d.blobs[i].shape, c.blobs[i].shape);
    EXPECT_EQ(d.blobs[i].data, c.blobs[i].data);
  }
  EXPECT_TRUE(same_parameters(model_from_checkpoint(d), m));
}

TEST(Checkpoint, NonFiniteMetricsRoundTrip) {
  Model m(small_config(), 23);
  PhaseTrainer t(m, corpus(10, 24), {}, quick_phase2(1), quiet());
  Checkpoint c = t.checkpoint();
  c.metrics = eval::MetricsReport{};
  c.metrics->ppl = std::numeric_limits<double>::infinity();
  c.metrics->kl = -std::numeric_limits<double>::infinity();
  c.metrics->mi = std::nan("");
  c.metrics->recon_nll = 1.5;
  const auto dir = fresh_dir("nonfinite");
  save_checkpoint(dir / "a.ckpt", c);
  const Checkpoint d = load_checkpoint(dir / "a.ckpt");
  ASSERT_TRUE(d.metrics.has_value());
  EXPECT_EQ(d.metrics->ppl, std::numeric_limits<double>::infinity());
  EXPECT_EQ(d.metrics->kl, -std::numeric_limits<double>::infinity());
  EXPECT_TRUE(std::isnan(d.metrics->mi));
  EXPECT_EQ(d.metrics->recon_nll, 1.5);
}

// Trains `total` steps straight through and with a save/load after `split`
// steps; both must agree bit for bit.
void expect_bit_exact_resume(std::size_t split, std::size_t total) {
  const auto train = corpus(37, 26);
  const PhaseConfig cfg = quick_phase2(4);
  RunOptions o = quiet();
  o.validate_each_epoch = false;

  Model straight(small_config(), 27);
  PhaseTrainer a(straight, train, {}, cfg, o);
  a.run(total);

  Model interrupted(small_config(), 27);
  PhaseTrainer b(interrupted, train, {}, cfg, o);
  b.run(split);
  const auto dir = fresh_dir("resume");
  save_checkpoint(dir / "mid.ckpt", b.checkpoint());

  const Checkpoint c = load_checkpoint(dir / "mid.ckpt");
  Model resumed = model_from_checkpoint(c);
  PhaseTrainer r(resumed, train, {}, cfg, o);
  r.restore(c);
  r.run(total - split);

  EXPECT_TRUE(same_parameters(straight, resumed));
  ASSERT_EQ(r.log().steps.size(), total - split);
  for (std::size_t i = 0; i < total - split; ++i) {
    const auto& x = a.log().steps[split + i];
    const auto& y = r.log().steps[i];
    EXPECT_EQ(x.step, y.step);
    EXPECT_EQ(x.total, y.total);
    EXPECT_EQ(x.kl_raw, y.kl_raw);
    EXPECT_EQ(x.beta, y.beta);
  }
}

TEST(Checkpoint, ResumeMidEpochIsBitExact) { expect_bit_exact_resume(2, 12); }
TEST(Checkpoint, ResumeAtEpochBoundaryIsBitExact) { expect_bit_exact_resume(5, 15); }

TEST(Checkpoint, TamperedFileDetected) {
  Model m(small_config(), 28);
  PhaseTrainer t(m, corpus(10, 29), {}, quick_phase2(1), quiet());
  const auto dir = fresh_dir("tamper");
  save_checkpoint(dir / "x.ckpt", t.checkpoint());
  std::string bytes = slurp(dir / "x.ckpt");
  ASSERT_NO_THROW(load_checkpoint(dir / "x.ckpt"));

  auto write = [&](const std::string& s) {
    std::ofstream out(dir / "y.ckpt", std::ios::binary);
    out << s;
  };
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  write(flipped);
  EXPECT_THROW(load_checkpoint(dir / "y.ckpt"), CheckpointError);
  write(bytes.substr(0, bytes.size() - 100));
  EXPECT_THROW(load_checkpoint(dir / "y.ckpt"), CheckpointError);
  std::string version = bytes;
  version[4] = '2';
  write(version);
  EXPECT_THROW(load_checkpoint(dir / "y.ckpt"), CheckpointError);
  write("not a checkpoint at all");
  EXPECT_THROW(load_checkpoint(dir / "y.ckpt"), CheckpointError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST(Checkpoint, MismatchedModelConfigIsShapeError) {
  Model m(small_config(), 30);
  PhaseTrainer t(m, corpus(10, 31), {}, quick_phase2(1), quiet());
  const Checkpoint c = t.checkpoint();
  model::ModelConfig other = small_config();
  other.latent_dim = 6;
  Model wrong(other, 1);
  EXPECT_THROW(load_parameters(c, wrong), DimensionError);
  other = small_config();
  other.dec_layers = 3;
  Model deeper(other, 1);
  EXPECT_THROW(load_parameters(c, deeper), DimensionError);
}

TEST(Checkpoint, RestoreRejectsOtherPhaseOrSeed) {
  Model m(small_config(), 32);
  const auto train = corpus(10, 33);
  PhaseTrainer t(m, train, {}, quick_phase2(1), quiet());
  const Checkpoint c = t.checkpoint();
  PhaseConfig p1 = PhaseConfig::phase1_defaults();
  p1.max_len = 10;
  p1.seed = 7;
  PhaseTrainer other(m, train, {}, p1, quiet());
  EXPECT_THROW(other.restore(c), ConfigError);
  PhaseConfig reseeded = quick_phase2(1);
  reseeded.seed = 8;
  PhaseTrainer r(m, train, {}, reseeded, quiet());
  EXPECT_THROW(r.restore(c), ConfigError);
}

// ---- logs on disk ------------------------------------------------------------------------------

TwoPhaseConfig small_two_phase() {
  TwoPhaseConfig cfg;
  cfg.phase1.epochs = 2;
  cfg.phase1.batch_size = 8;
  cfg.phase1.max_len = 10;
  cfg.phase2 = quick_phase2(2);
  return cfg;
}

TEST(TrainLogCsv, IdenticalSeedsIdenticalFiles) {
  const auto train = corpus(20, 34), valid = corpus(10, 35);
  const auto a = fresh_dir("log_a"), b = fresh_dir("log_b");
  for (const auto& dir : {a, b}) {
    Model m(small_config(), 36);
    RunOptions o = quiet();
    o.out_dir = dir;
    train_two_phase(m, train, valid, small_two_phase(), o);
  }
  EXPECT_EQ(slurp(a / "train_log.csv"), slurp(b / "train_log.csv"));
  EXPECT_EQ(slurp(a / "epochs.csv"), slurp(b / "epochs.csv"));
  EXPECT_EQ(slurp(a / "phase2.ckpt"), slurp(b / "phase2.ckpt"));
  const auto rows = read_train_log_csv(a / "train_log.csv");
  EXPECT_EQ(rows.size(), 12u);
  EXPECT_EQ(rows.front().phase, 1);
  EXPECT_EQ(rows.back().phase, 2);
}

TEST(TrainLogCsv, ResumedRunReproducesFiles) {
  const auto train = corpus(20, 37), valid = corpus(10, 38);
  const auto full = fresh_dir("full"), part = fresh_dir("part");
  {
    Model m(small_config(), 39);
    RunOptions o = quiet();
    o.out_dir = full;
    train_two_phase(m, train, valid, small_two_phase(), o);
  }
  {
    // Phase 1 stops two steps into its second epoch; those steps are lost.
    Model m(small_config(), 39);
    RunOptions o = quiet();
    o.out_dir = part;
    PhaseTrainer t(m, train, valid, small_two_phase().phase1, o);
    t.run(t.steps_per_epoch() + 2);
  }
  const Checkpoint c = load_checkpoint(part / "phase1.ckpt");
  EXPECT_EQ(c.epoch, 1u);
  Model m = model_from_checkpoint(c);
  RunOptions o = quiet();
  o.out_dir = part;
  train_two_phase(m, train, valid, small_two_phase(), o, &c);
  EXPECT_EQ(slurp(full / "train_log.csv"), slurp(part / "train_log.csv"));
  EXPECT_EQ(slurp(full / "epochs.csv"), slurp(part / "epochs.csv"));
  EXPECT_EQ(slurp(full / "phase2.ckpt"), slurp(part / "phase2.ckpt"));
}

TEST(TrainLogCsv, RoundTrip) {
  std::vector<StepRecord> rows(3);
  for (std::size_t i = 0; i < 3; ++i) {
    rows[i].step = i;
    rows[i].epoch = 1;
    rows[i].phase = 2;
    rows[i].beta = 0.1 * static_cast<double>(i) / 3.0;
    rows[i].total = 1.0 / 7.0 + static_cast<double>(i);
  }
  const auto dir = fresh_dir("csv");
  write_train_log_csv(dir / "log.csv", rows);
  const auto back = read_train_log_csv(dir / "log.csv");
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].beta, rows[i].beta);
    EXPECT_EQ(back[i].total, rows[i].total);
  }
  EXPECT_EQ(slurp(dir / "log.csv").rfind("#trainlog v1\nstep,epoch,phase,beta,", 0), 0u);
}

}  // namespace
