#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "tvae/error.hpp"
#include "tvae/grad_check.hpp"
#include "tvae/objective.hpp"
#include "tvae/ops.hpp"

namespace {

using namespace tvae;
using namespace tvae::diff;
using namespace tvae::objective;
using tvae::testing::random_tensor;
using TD = Tensor<double>;

KlSchedule schedule(ScheduleKind kind) {
  KlSchedule s;
  s.kind = kind;
  return s;
}

// ---- gaussian_kl ----------------------------------------------------------------

TEST(GaussianKl, PriorMatchesPosterior) {
  const TD kl = gaussian_kl(TD::zeros({3, 5}), TD::zeros({3, 5}));
  ASSERT_EQ(kl.shape(), (Shape{5}));
  for (double v : kl.data()) EXPECT_EQ(v, 0.0);
}

TEST(GaussianKl, UnitMeanShift) {
  const TD kl = gaussian_kl(TD::full({1, 2}, 1.0), TD::zeros({1, 2}));
  EXPECT_DOUBLE_EQ(kl[0], 0.5);
  EXPECT_DOUBLE_EQ(kl[1], 0.5);
}

TEST(GaussianKl, AveragesOverBatch) {
  const TD mu({2, 1}, {1.0, 3.0});
  const TD kl = gaussian_kl(mu, TD::zeros({2, 1}));
  EXPECT_DOUBLE_EQ(kl[0], (0.5 + 4.5) / 2);
}

TEST(GaussianKl, MatchesMonteCarlo) {
  Rng rng(1);
  const std::size_t d = 8, samples = 100000;
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<double> mu(d), ls(d);
    for (std::size_t j = 0; j < d; ++j) {
      mu[j] = 2 * rng.uniform() - 1;
      ls[j] = 2 * rng.uniform() - 1;
    }
    // E_q[log q(z) - log p(z)]; the shared -0.5 log(2 pi) cancels.
    double total = 0;
    for (std::size_t n = 0; n < samples; ++n) {
      for (std::size_t j = 0; j < d; ++j) {
        const double eps = rng.normal();
        const double z = mu[j] + std::exp(ls[j]) * eps;
        total += (-ls[j] - 0.5 * eps * eps) + 0.5 * z * z;
      }
    }
    const double mc = total / samples;
    const TD kl = gaussian_kl(TD({1, d}, mu), TD({1, d}, ls));
    double closed = 0;
    for (double v : kl.data()) closed += v;
    EXPECT_NEAR(closed, mc, 0.01 * closed) << "trial " << trial;
  }
}

TEST(GaussianKl, NonNegativeProperty) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const double scale = std::pow(10.0, -12.0 + 13.0 * rng.uniform());
    const TD mu = random_tensor<double>({4, 6}, rng, scale);
    const TD ls = random_tensor<double>({4, 6}, rng, scale);
    const TD kl = gaussian_kl(mu, ls);
    for (double v : kl.data()) ASSERT_GE(v, 0.0) << "scale " << scale;
    const Tensor<float> klf = gaussian_kl(cast<float>(mu), cast<float>(ls));
    for (float v : klf.data()) ASSERT_GE(v, 0.0f) << "scale " << scale;
  }
}

TEST(GaussianKl, Gradient) {
  Rng rng(3);
  const TD ls = random_tensor<double>({3, 4}, rng, 0.5);
  const TD w = random_tensor<double>({4}, rng);
  const auto r_mu = grad_check([&](const TD& mu) { return sum_all(mul(gaussian_kl(mu, ls), w)); },
                               random_tensor<double>({3, 4}, rng));
  EXPECT_LT(r_mu.max_rel_error, 1e-6);
  const TD mu = random_tensor<double>({3, 4}, rng);
  // Smaller step: the log-sigma derivative vanishes at 0 faster than the
  // third-order truncation term does.
  const auto r_ls = grad_check([&](const TD& s) { return sum_all(mul(gaussian_kl(mu, s), w)); },
                               random_tensor<double>({3, 4}, rng, 0.5), 1e-5);
  EXPECT_LT(r_ls.max_rel_error, 1e-6);
}

TEST(GaussianKl, RejectsNonFinite) {
  const TD mu({1, 2}, {0.0, std::nan("")}, false);
  EXPECT_THROW(gaussian_kl(mu, TD::zeros({1, 2})), DivergenceError);
}

TEST(GaussianKl, ShapeMismatch) {
  EXPECT_THROW(gaussian_kl(TD::zeros({2, 3}), TD::zeros({2, 4})), DimensionError);
}

// ---- threshold_kl ----------------------------------------------------------------

TEST(ThresholdKl, ZeroLambdaIsSum) {
  const TD kl({3}, {0.1, 2.0, 0.0});
  EXPECT_EQ(threshold_kl(kl, 0.0).item(), sum_all(kl).item());
}

TEST(ThresholdKl, FloorEverywhere) {
  EXPECT_DOUBLE_EQ(threshold_kl(TD::zeros({32}), 3.0).item(), 96.0);
}

TEST(ThresholdKl, MixedFloorAndGradient) {
  const TD kl({2}, {0.2, 4.0}, true);
  const TD t = threshold_kl(kl, 0.5);
  EXPECT_DOUBLE_EQ(t.item(), 4.5);
  t.backward();
  EXPECT_EQ(kl.grad()[0], 0.0);
  EXPECT_EQ(kl.grad()[1], 1.0);
  const auto r = grad_check([](const TD& x) { return threshold_kl(x, 0.5); }, TD({2}, {0.2, 4.0}));
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(ThresholdKl, BoundsProperty) {
  Rng rng(4);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t d = 1 + rng.below(40);
    const double lambda = 4.0 * rng.uniform();
    std::vector<double> v(d);
    for (auto& x : v) x = 5.0 * rng.uniform() * rng.uniform();
    const double sum = std::accumulate(v.begin(), v.end(), 0.0);
    const double t = threshold_kl(TD({d}, v), lambda).item();
    EXPECT_GE(t, std::max(sum, lambda * d) - 1e-12);
    if (*std::min_element(v.begin(), v.end()) >= lambda) {
      EXPECT_NEAR(t, sum, 1e-12);
    }
  }
}

TEST(ThresholdKl, NegativeLambdaRejected) {
  EXPECT_THROW(threshold_kl(TD::zeros({2}), -1.0), ValueError);
}

// ---- reconstruction_nll ------------------------------------------------------------

TEST(ReconstructionNll, ConfidentLogitsGiveZero) {
  const std::size_t v = 6;
  const Ids targets({1, 3}, {4, 2, 5});
  std::vector<double> logits(3 * v, 0.0);
  for (std::size_t i = 0; i < 3; ++i) logits[i * v + static_cast<std::size_t>(targets.values[i])] = 1000.0;
  const auto ce = reconstruction_nll(TD({1, 3, v}, logits), targets, Mask({1, 3}, std::uint8_t{1}));
  EXPECT_EQ(ce.nll.item(), 0.0);
  EXPECT_EQ(ce.count, 3u);
}

TEST(ReconstructionNll, UniformLogits) {
  const std::size_t v = 7;
  const Ids targets({2, 3}, {4, 5, 6, 1, 2, 0});
  const Mask mask({2, 3}, {1, 1, 1, 1, 1, 0});
  const auto ce = reconstruction_nll(TD::zeros({2, 3, v}), targets, mask);
  EXPECT_NEAR(ce.nll.item(), 5 * std::log(7.0), 1e-12);
  EXPECT_EQ(ce.count, 5u);
}

TEST(ReconstructionNll, DelegatesToCrossEntropy) {
  Rng rng(5);
  const TD logits = random_tensor<double>({2, 4, 9}, rng);
  const Ids targets = tvae::testing::random_ids(2, 4, 9, rng);
  const Mask mask({2, 4}, {1, 1, 1, 0, 1, 1, 0, 0});
  EXPECT_EQ(reconstruction_nll(logits, targets, mask).nll.item(),
            cross_entropy_logits(logits, targets, mask).nll.item());
}

TEST(ReconstructionNll, EmptyMaskThrows) {
  EXPECT_THROW(reconstruction_nll(TD::zeros({1, 2, 5}), Ids({1, 2}, std::int32_t{4}),
                                  Mask({1, 2}, std::uint8_t{0})),
               ValueError);
}

// ---- kl_weight -----------------------------------------------------------------------

TEST(KlWeight, LinearFiftyAtEpochTwentyFive) {
  const auto s = schedule(ScheduleKind::linear);
  EXPECT_DOUBLE_EQ(kl_weight(s, 25 * 40, 40), 0.5);
  EXPECT_DOUBLE_EQ(kl_weight(s, 50 * 40, 40), 1.0);
  EXPECT_DOUBLE_EQ(kl_weight(s, 80 * 40, 40), 1.0);
}

TEST(KlWeight, StepZero) {
  EXPECT_EQ(kl_weight(schedule(ScheduleKind::zero), 0, 10), 0.0);
  EXPECT_EQ(kl_weight(schedule(ScheduleKind::linear), 0, 10), 0.0);
  EXPECT_EQ(kl_weight(schedule(ScheduleKind::cyclical), 0, 10), 0.0);
  auto c = schedule(ScheduleKind::constant);
  c.beta = 0.3;
  EXPECT_EQ(kl_weight(c, 0, 10), 0.3);
}

TEST(KlWeight, CyclicalHalfCycle) {
  auto s = schedule(ScheduleKind::cyclical);
  s.cycles = 4;
  s.ramp_fraction = 0.5;
  s.epochs = 8;
  const std::size_t spe = 10;  // total 80 steps, cycles of 20
  EXPECT_DOUBLE_EQ(kl_weight(s, 10, spe), 1.0);
  EXPECT_DOUBLE_EQ(kl_weight(s, 5, spe), 0.5);
  EXPECT_DOUBLE_EQ(kl_weight(s, 19, spe), 1.0);
  EXPECT_DOUBLE_EQ(kl_weight(s, 20, spe), 0.0);
  EXPECT_DOUBLE_EQ(kl_weight(s, 25, spe), 0.5);
}

TEST(KlWeight, PiecewiseLinearBoundedMonotoneWithinRamps) {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    KlSchedule s;
    s.kind = trial % 2 ? ScheduleKind::linear : ScheduleKind::cyclical;
    s.epochs = 1 + rng.below(20);
    s.cycles = 1 + rng.below(5);
    s.ramp_fraction = 0.05 + 0.95 * rng.uniform();
    const std::size_t spe = 1 + rng.below(30);
    const std::size_t total = static_cast<std::size_t>(s.epochs) * spe * 2;
    double prev = kl_weight(s, 0, spe);
    for (std::size_t step = 1; step <= total; ++step) {
      const double b = kl_weight(s, step, spe);
      ASSERT_GE(b, 0.0);
      ASSERT_LE(b, 1.0);
      // Drops happen only at cycle boundaries, where the weight restarts
      // within one step of 0.
      if (b < prev) {
        ASSERT_EQ(s.kind, ScheduleKind::cyclical);
        const double cycle = s.epochs * spe / s.cycles;
        ASSERT_LE(b, 1.0 / (cycle * s.ramp_fraction) + 1e-12) << "step " << step;
      }
      prev = b;
    }
    // Linear between grid points inside the first ramp.
    const double ramp_steps = s.kind == ScheduleKind::linear
                                  ? s.epochs * spe
                                  : s.epochs * spe / s.cycles * s.ramp_fraction;
    if (ramp_steps >= 3) {
      const double a = kl_weight(s, 0, spe), b = kl_weight(s, 1, spe), c = kl_weight(s, 2, spe);
      EXPECT_NEAR(b - a, c - b, 1e-12);
    }
  }
}

TEST(KlWeight, ValidatesConfig) {
  auto s = schedule(ScheduleKind::cyclical);
  s.ramp_fraction = 0.0;
  EXPECT_THROW(s.validate(), ConfigError);
  s.ramp_fraction = 1.0;
  EXPECT_NO_THROW(s.validate());
  LossConfig c;
  c.kl_threshold = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(kl_weight(schedule(ScheduleKind::linear), 1, 0), ValueError);
  EXPECT_EQ(parse_schedule_kind("cyclical"), ScheduleKind::cyclical);
  EXPECT_THROW(parse_schedule_kind("cosine"), ConfigError);
}

// ---- elbo_loss -------------------------------------------------------------------------

struct MicroRun {
  model::TransformerVAE<double> m;
  data::Batch batch;
  TD eps;

  explicit MicroRun(std::uint64_t seed) : m(tvae::testing::tiny_config(), seed) {
    Rng rng(seed);
    batch = tvae::testing::make_batch(tvae::testing::random_sentences(2, 2, 5, 12, rng));
    eps = random_tensor<double>({2, 4}, rng);
  }

  LossBreakdown<double> loss(double beta, double lambda) const {
    model::ForwardOptions<double> opt;
    opt.latent = model::LatentMode::fixed;
    opt.epsilon = &eps;
    const auto out = m.forward(batch, opt);
    return elbo_loss(out.logits, batch.tgt_out, batch.tgt_mask, out.latent, beta, lambda);
  }
};

TEST(ElboLoss, ZeroBetaIsReconstructionOnly) {
  const MicroRun run(1);
  const auto l = run.loss(0.0, 3.0);
  EXPECT_EQ(l.total, l.recon_nll);
  EXPECT_GT(l.kl_thresholded, 0.0);
}

TEST(ElboLoss, VanillaElbo) {
  const MicroRun run(2);
  const auto l = run.loss(1.0, 0.0);
  EXPECT_NEAR(l.total, l.recon_nll + l.kl_raw, 1e-12 * std::abs(l.total));
  EXPECT_EQ(l.kl_thresholded, l.kl_raw);
  EXPECT_EQ(l.kl_per_dim.size(), 4u);
}

TEST(ElboLoss, BreakdownIdentityProperty) {
  Rng rng(3);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const MicroRun run(10 + seed);
    const double beta = rng.uniform(), lambda = 2.0 * rng.uniform();
    const auto l = run.loss(beta, lambda);
    EXPECT_NEAR(l.total, l.recon_nll + beta * l.kl_thresholded, 1e-6 * std::abs(l.total));
    EXPECT_GE(l.kl_raw, 0.0);
    EXPECT_GE(l.kl_thresholded, l.kl_raw);
    EXPECT_EQ(l.batch_size, 2u);
  }
}

TEST(ElboLoss, ReconstructionIsBatchMeanOfTokenSums) {
  const MicroRun run(4);
  model::ForwardOptions<double> opt;
  opt.latent = model::LatentMode::fixed;
  opt.epsilon = &run.eps;
  const auto out = run.m.forward(run.batch, opt);
  const auto ce = reconstruction_nll(out.logits, run.batch.tgt_out, run.batch.tgt_mask);
  const auto l = run.loss(0.5, 0.0);
  EXPECT_NEAR(l.recon_nll, ce.nll.item() / 2, 1e-12);
  EXPECT_EQ(l.token_count, ce.count);
}

TEST(ElboLoss, ScheduleDrivenOverload) {
  const MicroRun run(5);
  model::ForwardOptions<double> opt;
  opt.latent = model::LatentMode::fixed;
  opt.epsilon = &run.eps;
  const auto out = run.m.forward(run.batch, opt);
  LossConfig cfg;
  cfg.kl_threshold = 0.25;
  cfg.free_bits_enabled = false;
  const auto l = elbo_loss(out.logits, run.batch.tgt_out, run.batch.tgt_mask, out.latent, cfg, 25, 2);
  EXPECT_DOUBLE_EQ(l.beta, 0.25);
  EXPECT_EQ(l.kl_thresholded, l.kl_raw);
}

std::vector<std::pair<std::string, TD>> all_params(model::TransformerVAE<double>& m) {
  std::vector<std::pair<std::string, TD>> out;
  for (auto& [name, t] : m.parameters()) out.emplace_back(name, t);
  return out;
}

TEST(ElboLoss, FullModelGradient) {
  MicroRun run(6);
  ASSERT_LE(run.m.parameters().numel(), 5000u);
  const auto r = grad_check([&] { return run.loss(0.7, 0.0).total_tensor; }, all_params(run.m));
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_tensor << "[" << r.worst_index << "]";
  EXPECT_EQ(r.coordinates, run.m.parameters().numel());
}

TEST(ElboLoss, FullModelGradientWithFreeBits) {
  MicroRun run(7);
  // Put the floor in the widest gap between per-dimension KLs so no
  // coordinate sits on the kink.
  auto kl = run.loss(1.0, 0.0).kl_per_dim;
  kl.push_back(0.0);
  std::sort(kl.begin(), kl.end());
  double lambda = 0, gap = -1;
  for (std::size_t i = 0; i + 1 < kl.size(); ++i) {
    if (kl[i + 1] - kl[i] > gap) {
      gap = kl[i + 1] - kl[i];
      lambda = 0.5 * (kl[i] + kl[i + 1]);
    }
  }
  const auto r = grad_check([&] { return run.loss(1.0, lambda).total_tensor; }, all_params(run.m));
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_tensor << "[" << r.worst_index << "]";
}

}  // namespace
