#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "pcct/diffusion.hpp"
#include "pcct/eval.hpp"
#include "support/stats.hpp"

using namespace pcct;
namespace fs = std::filesystem;

namespace {

/// Returns the batch's own noise field.
struct OracleNet {
  const TrainingBatch* batch;
  template <class S>
  nn::Var<S> forward(const nn::Var<S>& x, const std::vector<double>&) const {
    return nn::constant<S>({x->shape.n, 1, x->shape.h, x->shape.w},
                           std::vector<S>(batch->eps.begin(), batch->eps.end()));
  }
};

struct ZeroNet {
  template <class S>
  nn::Var<S> forward(const nn::Var<S>& x, const std::vector<double>&) const {
    return nn::zeros<S>({x->shape.n, 1, x->shape.h, x->shape.w});
  }
};

struct NanNet {
  template <class S>
  nn::Var<S> forward(const nn::Var<S>& x, const std::vector<double>&) const {
    return nn::constant<S>({x->shape.n, 1, x->shape.h, x->shape.w},
                           std::vector<S>(x->shape.plane() * x->shape.n, std::numeric_limits<S>::quiet_NaN()));
  }
};

TrainingBatch random_batch(int n, int c, int h, int w, std::uint64_t seed, const DiffusionSchedule& s) {
  Rng rng = make_rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  TrainingBatch b;
  b.cond_shape = {n, c, h, w};
  b.x.resize(b.cond_shape.size());
  b.y0.resize(static_cast<std::size_t>(n) * h * w);
  b.eps.resize(b.y0.size());
  for (auto& v : b.x) v = 0.3 * nd(rng);
  for (auto& v : b.y0) v = 0.5 * nd(rng);
  for (auto& v : b.eps) v = nd(rng);
  for (int i = 0; i < n; ++i) b.gamma.push_back(sample_gamma(s, rng).gamma);
  return b;
}

nn::UNetConfig tiny_eps_net(int cond_channels) {
  nn::UNetConfig c;
  c.in_channels = cond_channels + 1;
  c.base_width = 8;
  c.channel_mult = {1, 2};
  c.attention = true;
  c.gamma_embedding = true;
  return c;
}

SampleGroup synthetic_group(const std::string& id, int size, std::uint64_t seed) {
  const auto geom = GridGeometry::centered(size, size, 0.5, 0.5);
  Rng rng = make_rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<float> clean(geom.size()), hr(geom.size()), a(geom.size()), b(geom.size());
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      const std::size_t k = static_cast<std::size_t>(r) * size + c;
      const double v = std::hypot(r - size / 2.0, c - size / 2.0) < size / 3.0 ? 300.0 : -200.0;
      clean[k] = quantize_hu(v);
      hr[k] = quantize_hu(v + 10 * nd(rng));
      a[k] = quantize_hu(v + 60 * nd(rng));
      b[k] = quantize_hu(v + 60 * nd(rng));
    }
  SampleGroup g;
  g.id = id;
  g.clean_hr = ImageGrid(geom, clean, id + "/clean_hr");
  g.noisy_hr = ImageGrid(geom, hr, id + "/noisy_hr");
  g.lr_a = ImageGrid(geom, a, id + "/lr_a");
  g.lr_b = ImageGrid(geom, b, id + "/lr_b");
  return g;
}

DiffusionTrainConfig tiny_train(int iterations, int patch) {
  DiffusionTrainConfig c;
  c.iterations = iterations;
  c.batch_size = 2;
  c.learning_rate = 1e-3;
  c.patch_size = patch;
  c.T = 50;
  c.beta_start = 1e-4;
  c.beta_end = 0.2;
  c.net = tiny_eps_net(1);
  c.seed = 1;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

TEST(Schedule, SingleStep) {
  const auto s = make_schedule(1, 0.5, 0.5);
  EXPECT_DOUBLE_EQ(s.alpha[1], 0.5);
  EXPECT_DOUBLE_EQ(s.gamma[1], 0.5);
  EXPECT_DOUBLE_EQ(s.gamma[0], 1.0);
}

TEST(Schedule, CumulativeProductIdentity) {
  const auto s = make_schedule();
  ASSERT_EQ(s.T, 2000);
  long double prod = 1.0L;
  for (int t = 1; t <= s.T; ++t) {
    // independent recomputation of beta_t and the running product
    const long double beta = 1e-6L + (1e-2L - 1e-6L) * (t - 1) / 1999.0L;
    prod *= (1.0L - beta);
    EXPECT_NEAR(s.gamma[t] / static_cast<double>(prod), 1.0, 1e-12) << "t=" << t;
    EXPECT_NEAR(s.gamma[t] / s.gamma[t - 1], s.alpha[t], 4e-16) << "t=" << t;
    EXPECT_LT(s.gamma[t], s.gamma[t - 1]);
  }
  EXPECT_LT(s.gamma[s.T], 1e-3);
  EXPECT_DOUBLE_EQ(s.beta[1], 1e-6);
  EXPECT_DOUBLE_EQ(s.beta[s.T], 1e-2);
}

TEST(Schedule, InvalidRangesRejected) {
  EXPECT_THROW(make_schedule(0, 1e-4, 0.02), ConfigError);
  EXPECT_THROW(make_schedule(10, 0.0, 0.02), ConfigError);
  EXPECT_THROW(make_schedule(10, 0.03, 0.02), ConfigError);
  EXPECT_THROW(make_schedule(10, 1e-4, 1.0), ConfigError);
}

TEST(Schedule, RespacedKeepsEndpointsAndProducts) {
  const auto s = make_schedule(200, 1e-4, 0.08);
  const auto r = respace(s, 20);
  EXPECT_EQ(r.T, 20);
  EXPECT_DOUBLE_EQ(r.gamma[20], s.gamma[200]);
  double prod = 1;
  for (int i = 1; i <= 20; ++i) {
    prod *= r.alpha[i];
    EXPECT_NEAR(prod / r.gamma[i], 1.0, 1e-12);
  }
  EXPECT_THROW(respace(s, 0), ConfigError);
  EXPECT_THROW(respace(s, 201), ConfigError);
}

TEST(SampleGamma, PiecewiseUniformLaw) {
  const auto s = make_schedule();
  Rng rng = make_rng(7);
  std::vector<double> draws;
  for (int i = 0; i < 100000; ++i) {
    const auto d = sample_gamma(s, rng);
    ASSERT_GT(d.gamma, s.gamma[s.T]);
    ASSERT_LT(d.gamma, 1.0);
    ASSERT_GT(d.gamma, s.gamma[d.t]);
    ASSERT_LT(d.gamma, s.gamma[d.t - 1]);
    draws.push_back(d.gamma);
  }
  // CDF of the mixture of uniforms on (gamma_t, gamma_{t-1}), t ~ U{1..T}
  auto cdf = [&](double g) {
    double acc = 0;
    for (int t = 1; t <= s.T; ++t) acc += std::clamp((g - s.gamma[t]) / (s.gamma[t - 1] - s.gamma[t]), 0.0, 1.0);
    return acc / s.T;
  };
  EXPECT_GT(oracle::ks_test(draws, cdf), 0.01);
}

TEST(SampleGamma, SingleStepIsUniformAboveGamma1) {
  const auto s = make_schedule(1, 0.5, 0.5);
  Rng rng = make_rng(3);
  std::vector<double> draws;
  for (int i = 0; i < 20000; ++i) draws.push_back(sample_gamma(s, rng).gamma);
  EXPECT_GT(oracle::ks_test(draws, [](double g) { return std::clamp((g - 0.5) / 0.5, 0.0, 1.0); }), 0.01);
}

// ---------------------------------------------------------------------------
// forward process and objective
// ---------------------------------------------------------------------------

TEST(ForwardProcess, MarginalMeanAndVariance) {
  const double y0 = 0.7;
  Rng rng = make_rng(11);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (double g : {0.1, 0.5, 0.9}) {
    std::vector<double> v(1000000);
    for (auto& x : v) x = forward_noise(y0, nd(rng), g);
    const double m = oracle::mean(v), sd = oracle::stddev(v);
    EXPECT_NEAR(m / (std::sqrt(g) * y0), 1.0, 0.02) << g;
    EXPECT_NEAR(sd * sd / (1.0 - g), 1.0, 0.02) << g;
  }
}

TEST(ForwardProcess, GammaToOneRecoversTarget) {
  EXPECT_DOUBLE_EQ(forward_noise(0.3, 2.0, 1.0), 0.3);
  EXPECT_NEAR(forward_noise(0.3, 2.0, 1.0 - 1e-12), 0.3, 1e-5);
}

TEST(TrainingLoss, OracleNetGivesZero) {
  const auto s = make_schedule(200, 1e-4, 0.08);
  const TrainingBatch b = random_batch(3, 2, 8, 8, 1, s);
  const OracleNet net{&b};
  EXPECT_LT(training_loss<double>(net, b)->value[0], 1e-6);
}

TEST(TrainingLoss, ZeroNetGivesMeanAbsNormal) {
  const auto s = make_schedule(200, 1e-4, 0.08);
  std::vector<double> losses;
  for (int i = 0; i < 50; ++i) losses.push_back(training_loss<double>(ZeroNet{}, random_batch(4, 1, 32, 32, 100 + i, s))->value[0]);
  EXPECT_NEAR(oracle::mean(losses) / std::sqrt(2.0 / std::numbers::pi), 1.0, 0.02);
}

TEST(TrainingLoss, NonFiniteForwardAborts) {
  const auto s = make_schedule(10, 1e-4, 0.1);
  EXPECT_THROW(training_loss<double>(NanNet{}, random_batch(1, 1, 4, 4, 1, s)), NumericalError);
}

TEST(TrainingLoss, GradientMatchesFiniteDifferences) {
  const auto s = make_schedule(50, 1e-4, 0.2);
  const TrainingBatch b = random_batch(2, 2, 8, 8, 5, s);
  nn::UNetConfig c = tiny_eps_net(2);
  c.base_width = 4;
  c.norm_groups = 2;
  c.norm = nn::NormKind::Group;
  nn::UNet<double> net(c, 3);
  // move zero-initialised layers off zero so every path carries gradient
  Rng rng = make_rng(9);
  std::normal_distribution<double> nd(0.0, 0.2);
  for (auto& p : net.params())
    for (auto& v : p.var->value)
      if (v == 0.0) v = nd(rng);
  net.zero_grad();
  auto loss = training_loss<double>(net, b);
  nn::backward(loss);
  std::uniform_int_distribution<std::size_t> pick(0, net.params().size() - 1);
  int checked = 0;
  while (checked < 10) {
    auto& p = net.params()[pick(rng)];
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, p.var->value.size() - 1)(rng);
    const double analytic = p.var->grad[i];
    if (std::abs(analytic) < 1e-6) continue;
    const double h = 1e-6, orig = p.var->value[i];
    p.var->value[i] = orig + h;
    const double lp = training_loss<double>(net, b)->value[0];
    p.var->value[i] = orig - h;
    const double lm = training_loss<double>(net, b)->value[0];
    p.var->value[i] = orig;
    const double numeric = (lp - lm) / (2 * h);
    EXPECT_NEAR(numeric, analytic, 1e-3 * std::max(std::abs(analytic), 1e-3)) << p.name << "[" << i << "]";
    ++checked;
  }
}

// ---------------------------------------------------------------------------
// reverse process
// ---------------------------------------------------------------------------

TEST(ReverseProcess, ZeroPredictionIsPureRescaling) {
  const auto s = make_schedule(100, 1e-4, 0.05);
  for (int t : {1, 37, 100}) EXPECT_DOUBLE_EQ(reverse_step(0.8, 0.0, s.alpha[t], s.gamma[t], 0.0), 0.8 / std::sqrt(s.alpha[t]));
}

TEST(ReverseProcess, OracleEpsilonRecoversTarget) {
  const auto s = make_schedule(100, 1e-4, 0.1);
  const int h = 32, w = 32;
  const SampleGroup g = synthetic_group("o", h, 4);
  const HuNormalizer n;
  std::vector<float> y0(h * w);
  for (std::size_t i = 0; i < y0.size(); ++i) y0[i] = n.to_net(g.clean_hr->values()[i]);
  // exact noise implied by the current iterate and the known target
  EpsilonFn oracle_eps = [&](const std::vector<float>& in, int c, int hh, int ww, double gamma) {
    const float* y = in.data() + static_cast<std::size_t>(c - 1) * hh * ww;
    std::vector<float> e(static_cast<std::size_t>(hh) * ww);
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = static_cast<float>((y[i] - std::sqrt(gamma) * y0[i]) / std::sqrt(1 - gamma));
    return e;
  };
  std::vector<float> cond(h * w, 0.0f);
  const auto out = reverse_diffusion(oracle_eps, {cond}, h, w, s, 21);
  double se = 0, lo = 1e9, hi = -1e9;
  for (std::size_t i = 0; i < y0.size(); ++i) {
    se += (out[i] - y0[i]) * (out[i] - y0[i]);
    lo = std::min<double>(lo, y0[i]);
    hi = std::max<double>(hi, y0[i]);
  }
  EXPECT_LT(std::sqrt(se / y0.size()), 0.05 * (hi - lo));
}

TEST(Sampling, DeterministicGivenSeed) {
  auto cfg = tiny_train(3, 16);
  const SampleGroup g = synthetic_group("d", 24, 2);
  const TrainedDDPM m = train_ddpm({g}, ConditioningScheme::Plain, cfg);
  const ImageGrid a = sample_group(m, g, 99), b = sample_group(m, g, 99), c = sample_group(m, g, 100);
  EXPECT_EQ(a.geometry(), g.lr_a->geometry());
  for (std::size_t i = 0; i < a.values().size(); ++i) ASSERT_EQ(a.values()[i], b.values()[i]);
  EXPECT_NE(std::vector<float>(a.values().begin(), a.values().end()),
            std::vector<float>(c.values().begin(), c.values().end()));
  const ImageGrid r = sample_group(m, g, 99, 10);
  EXPECT_EQ(r.geometry(), g.lr_a->geometry());
}

TEST(Sampling, ChannelMismatchRejected) {
  const SampleGroup g = synthetic_group("m", 16, 2);
  const TrainedDDPM m = train_ddpm({g}, ConditioningScheme::Plain, tiny_train(1, 16));
  EXPECT_THROW(sample(m, {&*g.lr_a, &*g.lr_b}, 1), ConfigError);
}

// ---------------------------------------------------------------------------
// schemes
// ---------------------------------------------------------------------------

TEST(Schemes, ChannelCounts) {
  EXPECT_EQ(conditional_channel_count(ConditioningScheme::Plain), 1);
  EXPECT_EQ(conditional_channel_count(ConditioningScheme::NoiseSplit), 2);
  EXPECT_EQ(conditional_channel_count(ConditioningScheme::DenoiseOnly), 1);
  EXPECT_EQ(conditional_channels(ConditioningScheme::Plain), std::vector<std::string>{"lr_a"});
  EXPECT_EQ(conditional_channels(ConditioningScheme::NoiseSplit), (std::vector<std::string>{"denoised_lr", "noise_map"}));
  EXPECT_EQ(conditional_channels(ConditioningScheme::DenoiseOnly), std::vector<std::string>{"denoised_lr"});
  for (const char* s : {"plain", "noise_split", "denoise_only"})
    EXPECT_EQ(to_string(conditioning_scheme_from_string(s)), s);
  EXPECT_THROW(conditioning_scheme_from_string("ddpm"), ConfigError);
}

TEST(Schemes, NetworkInputFollowsScheme) {
  SampleGroup g = synthetic_group("s", 16, 3);
  g = attach_denoised(g, [](const ImageGrid& x) { return x; });
  for (auto s : {ConditioningScheme::Plain, ConditioningScheme::NoiseSplit, ConditioningScheme::DenoiseOnly}) {
    const TrainedDDPM m = train_ddpm({g}, s, tiny_train(1, 16));
    EXPECT_EQ(m.net.config().in_channels, conditional_channel_count(s) + 1);
  }
}

TEST(Schemes, PlainTrainsWithoutDenoisedChannels) {
  const SampleGroup g = synthetic_group("p", 16, 3);
  EXPECT_NO_THROW(train_ddpm({g}, ConditioningScheme::Plain, tiny_train(2, 16)));
}

TEST(Schemes, SplitSchemesNeedDenoiseApply) {
  const SampleGroup g = synthetic_group("q", 16, 3);
  for (auto s : {ConditioningScheme::NoiseSplit, ConditioningScheme::DenoiseOnly}) {
    try {
      train_ddpm({g}, s, tiny_train(1, 16));
      FAIL() << "expected a dependency error";
    } catch (const DependencyError& e) {
      EXPECT_EQ(e.stage(), "denoise-apply");
      EXPECT_NE(std::string(e.what()).find("denoise-apply"), std::string::npos);
    }
  }
  SampleGroup partial = attach_denoised(g, [](const ImageGrid& x) { return x; });
  partial.noise_map.reset();
  EXPECT_THROW(train_ddpm({partial}, ConditioningScheme::NoiseSplit, tiny_train(1, 16)), DependencyError);
  EXPECT_NO_THROW(train_ddpm({partial}, ConditioningScheme::DenoiseOnly, tiny_train(1, 16)));
}

TEST(DiffusionConfig, DefaultsAndStrictParsing) {
  const DiffusionTrainConfig d;
  EXPECT_EQ(d.T, 2000);
  EXPECT_EQ(d.batch_size, 4);
  EXPECT_DOUBLE_EQ(d.learning_rate, 1e-4);
  EXPECT_EQ(d.patch_size, 128);
  EXPECT_TRUE(d.net.attention);
  const auto c = diffusion_train_config_from_json({{"T", 200}, {"beta_end", 0.08}, {"target", "clean_hr"}});
  EXPECT_EQ(c.T, 200);
  EXPECT_EQ(c.target, DiffusionTarget::CleanHr);
  EXPECT_THROW(diffusion_train_config_from_json({{"Tee", 200}}), ConfigError);
  EXPECT_THROW(diffusion_train_config_from_json({{"beta_start", 0.5}, {"beta_end", 0.1}}), ConfigError);
}

TEST(DiffusionCheckpoint, RoundTrip) {
  const SampleGroup g = synthetic_group("c", 16, 5);
  const TrainedDDPM m = train_ddpm({g}, ConditioningScheme::Plain, tiny_train(2, 16));
  const fs::path stem = fs::temp_directory_path() / "pcct_test_ddpm_ckpt" / "plain";
  fs::remove_all(stem.parent_path());
  save_ddpm(stem, m);
  const TrainedDDPM back = load_ddpm(stem);
  EXPECT_EQ(back.scheme, m.scheme);
  EXPECT_EQ(back.schedule.T, m.schedule.T);
  EXPECT_EQ(back.optimizer->steps(), 2);
  const ImageGrid a = sample_group(m, g, 5), b = sample_group(back, g, 5);
  for (std::size_t i = 0; i < a.values().size(); ++i) ASSERT_EQ(a.values()[i], b.values()[i]);
}

// ---------------------------------------------------------------------------
// overfit oracle
// ---------------------------------------------------------------------------

TEST(Overfit, SinglePairCorpus) {
  const SampleGroup g = synthetic_group("single", 32, 8);
  DiffusionTrainConfig c = tiny_train(2000, 32);
  c.T = 200;
  c.beta_start = 1e-4;
  c.beta_end = 0.08;
  c.batch_size = 4;
  c.net.base_width = 16;
  c.learning_rate = 2e-3;
  const TrainedDDPM m = train_ddpm({g}, ConditioningScheme::Plain, c);
  EXPECT_LT(nn::smooth(m.loss_history, 100).back(), 0.1);
  const ImageGrid out = sample_group(m, g, 3);
  const auto ps = reference_metrics(out, *g.noisy_hr);
  const auto pl = reference_metrics(*g.lr_a, *g.noisy_hr);
  EXPECT_GT(ps.psnr, pl.psnr);
}
