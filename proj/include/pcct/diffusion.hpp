#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pcct/core/error.hpp"
#include "pcct/core/image_grid.hpp"
#include "pcct/core/json_util.hpp"
#include "pcct/core/rng.hpp"
#include "pcct/dataset.hpp"
#include "pcct/denoiser.hpp"
#include "pcct/nn/optim.hpp"
#include "pcct/nn/unet.hpp"

namespace pcct {

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

/// Index t runs 1..T; entry 0 holds the convention alpha_0 = gamma_0 = 1.
struct DiffusionSchedule {
  int T = 0;
  double beta_start = 0;
  double beta_end = 0;
  std::vector<double> beta, alpha, gamma;
};

inline DiffusionSchedule make_schedule(int T = 2000, double beta_start = 1e-6, double beta_end = 1e-2) {
  if (T < 1) throw ConfigError("diffusion T must be at least 1");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1)) {
    throw ConfigError("diffusion betas must satisfy 0 < beta_start <= beta_end < 1");
  }
  DiffusionSchedule s{T, beta_start, beta_end, std::vector<double>(T + 1, 0.0), std::vector<double>(T + 1, 1.0),
                      std::vector<double>(T + 1, 1.0)};
  for (int t = 1; t <= T; ++t) {
    s.beta[t] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
    s.alpha[t] = 1.0 - s.beta[t];
    s.gamma[t] = s.gamma[t - 1] * s.alpha[t];
  }
  return s;
}

/// Sub-schedule over `steps` evenly spaced timesteps ending at T; the
/// per-step alphas are recomputed from the retained gammas.
inline DiffusionSchedule respace(const DiffusionSchedule& s, int steps) {
  if (steps < 1 || steps > s.T) {
    throw ConfigError("steps_override must be in [1, " + std::to_string(s.T) + "]; got " + std::to_string(steps));
  }
  if (steps == s.T) return s;
  DiffusionSchedule r{steps, s.beta_start, s.beta_end, std::vector<double>(steps + 1, 0.0),
                      std::vector<double>(steps + 1, 1.0), std::vector<double>(steps + 1, 1.0)};
  for (int i = 1; i <= steps; ++i) {
    const int t = static_cast<int>(std::lround(static_cast<double>(i) * s.T / steps));
    r.gamma[i] = s.gamma[t];
    r.alpha[i] = r.gamma[i] / r.gamma[i - 1];
    r.beta[i] = 1.0 - r.alpha[i];
  }
  return r;
}

struct GammaDraw {
  double gamma;
  int t;
};

/// t ~ U{1..T}, then gamma ~ U(gamma_t, gamma_{t-1}).
inline GammaDraw sample_gamma(const DiffusionSchedule& s, Rng& rng) {
  const int t = std::uniform_int_distribution<int>(1, s.T)(rng);
  const double lo = s.gamma[t], hi = s.gamma[t - 1];
  double g = lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  if (g <= lo) g = std::nextafter(lo, hi);
  if (g >= hi) g = std::nextafter(hi, lo);
  return {g, t};
}

/// sqrt(gamma) * y0 + sqrt(1 - gamma) * eps
inline double forward_noise(double y0, double eps, double gamma) {
  return std::sqrt(gamma) * y0 + std::sqrt(1.0 - gamma) * eps;
}

/// One reverse step: (y_t - (1 - alpha)/sqrt(1 - gamma) * eps_hat)/sqrt(alpha) + sqrt(1 - alpha) * z.
inline double reverse_step(double y_t, double eps_hat, double alpha, double gamma, double z) {
  return (y_t - (1.0 - alpha) / std::sqrt(1.0 - gamma) * eps_hat) / std::sqrt(alpha) + std::sqrt(1.0 - alpha) * z;
}

// ---------------------------------------------------------------------------
// conditioning
// ---------------------------------------------------------------------------

enum class ConditioningScheme { Plain, NoiseSplit, DenoiseOnly };

inline std::string to_string(ConditioningScheme s) {
  switch (s) {
    case ConditioningScheme::Plain: return "plain";
    case ConditioningScheme::NoiseSplit: return "noise_split";
    case ConditioningScheme::DenoiseOnly: return "denoise_only";
  }
  return "?";
}

inline ConditioningScheme conditioning_scheme_from_string(const std::string& s) {
  if (s == "plain") return ConditioningScheme::Plain;
  if (s == "noise_split") return ConditioningScheme::NoiseSplit;
  if (s == "denoise_only") return ConditioningScheme::DenoiseOnly;
  throw ConfigError("unknown conditioning scheme '" + s + "' (expected plain|noise_split|denoise_only)");
}

inline const std::vector<std::string>& conditional_channels(ConditioningScheme s) {
  static const std::vector<std::string> plain = {"lr_a"}, split = {"denoised_lr", "noise_map"},
                                        den = {"denoised_lr"};
  switch (s) {
    case ConditioningScheme::Plain: return plain;
    case ConditioningScheme::NoiseSplit: return split;
    case ConditioningScheme::DenoiseOnly: return den;
  }
  return plain;
}

inline int conditional_channel_count(ConditioningScheme s) {
  return static_cast<int>(conditional_channels(s).size());
}

/// Image channels use the HU normalizer; the noise map is scaled only.
inline float normalize_channel(const std::string& channel, double hu, const HuNormalizer& n) {
  return channel == "noise_map" ? static_cast<float>(hu / n.scale) : n.to_net(hu);
}

/// Conditional images of a group for `scheme`, in channel order.
inline std::vector<const ImageGrid*> conditional_images(const SampleGroup& g, ConditioningScheme scheme) {
  std::vector<const ImageGrid*> out;
  for (const auto& name : conditional_channels(scheme)) {
    const auto& c = g.channel(name);
    if (!c) {
      throw DependencyError("denoise-apply", "scheme " + to_string(scheme) + " needs the " + name +
                                                 " channel of group '" + g.id +
                                                 "'; run denoise-apply on the dataset first");
    }
    out.push_back(&*c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// training objective
// ---------------------------------------------------------------------------

/// Conditional stack x (n, C, h, w), targets y0 and noise eps (n, 1, h, w).
struct TrainingBatch {
  nn::Shape cond_shape;
  std::vector<double> x, y0, eps, gamma;
};

/// Mean |f(x, sqrt(g) y0 + sqrt(1-g) eps, g) - eps| over all pixels.
template <class S, class Net>
nn::Var<S> training_loss(const Net& net, const TrainingBatch& b) {
  const nn::Shape cs = b.cond_shape;
  const nn::Shape ys{cs.n, 1, cs.h, cs.w};
  if (b.x.size() != cs.size() || b.y0.size() != ys.size() || b.eps.size() != ys.size() ||
      b.gamma.size() != static_cast<std::size_t>(cs.n)) {
    throw ConfigError("training batch fields have inconsistent shapes");
  }
  std::vector<S> noisy(ys.size()), eps(ys.size());
  for (int n = 0; n < cs.n; ++n)
    for (std::size_t i = 0; i < ys.plane(); ++i) {
      const std::size_t k = n * ys.plane() + i;
      noisy[k] = static_cast<S>(forward_noise(b.y0[k], b.eps[k], b.gamma[n]));
      eps[k] = static_cast<S>(b.eps[k]);
    }
  auto x = nn::constant<S>(cs, std::vector<S>(b.x.begin(), b.x.end()));
  auto in = nn::concat(x, nn::constant<S>(ys, std::move(noisy)));
  auto pred = net.forward(in, b.gamma);
  if (!(pred->shape == ys)) throw ConfigError("epsilon network output shape does not match y_t");
  for (S v : pred->value)
    if (!std::isfinite(static_cast<double>(v))) throw NumericalError("non-finite epsilon prediction in forward pass");
  return nn::l1_loss(pred, nn::constant<S>(ys, std::move(eps)));
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

enum class DiffusionTarget { NoisyHr, CleanHr };

inline std::string to_string(DiffusionTarget t) { return t == DiffusionTarget::NoisyHr ? "noisy_hr" : "clean_hr"; }

inline DiffusionTarget diffusion_target_from_string(const std::string& s) {
  if (s == "noisy_hr") return DiffusionTarget::NoisyHr;
  if (s == "clean_hr") return DiffusionTarget::CleanHr;
  throw ConfigError("unknown diffusion target '" + s + "' (expected noisy_hr|clean_hr)");
}

inline nn::UNetConfig default_epsilon_net() {
  nn::UNetConfig c;
  c.base_width = 32;
  c.channel_mult = {1, 2, 2};
  c.attention = true;
  c.gamma_embedding = true;
  return c;
}

struct DiffusionTrainConfig {
  int iterations = 20000;
  int batch_size = 4;
  double learning_rate = 1e-4;
  int patch_size = 128;
  int T = 2000;
  double beta_start = 1e-6;
  double beta_end = 1e-2;
  nn::UNetConfig net = default_epsilon_net();  // in_channels follows the scheme
  HuNormalizer normalizer;
  DiffusionTarget target = DiffusionTarget::NoisyHr;
  std::uint64_t seed = 0;

  void validate() const {
    require(iterations > 0, "diffusion iterations must be positive");
    require(batch_size > 0, "diffusion batch_size must be positive");
    require(learning_rate > 0, "diffusion learning_rate must be positive");
    require(patch_size > 0 && patch_size % net.divisor() == 0,
            "diffusion patch_size must be a positive multiple of " + std::to_string(net.divisor()));
    require(net.gamma_embedding, "epsilon network needs the gamma embedding");
    require(net.out_channels == 1, "epsilon network must have one output channel");
    make_schedule(T, beta_start, beta_end);
  }
};

inline json to_json(const DiffusionTrainConfig& c) {
  return {{"iterations", c.iterations}, {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
          {"patch_size", c.patch_size}, {"T", c.T},                   {"beta_start", c.beta_start},
          {"beta_end", c.beta_end},     {"net", nn::to_json(c.net)},  {"normalizer", to_json(c.normalizer)},
          {"target", to_string(c.target)}, {"seed", c.seed}};
}

inline DiffusionTrainConfig diffusion_train_config_from_json(const json& j, const std::string& where = "diffusion") {
  DiffusionTrainConfig c;
  StrictReader r(j, where);
  r.get("iterations", c.iterations);
  r.get("batch_size", c.batch_size);
  r.get("learning_rate", c.learning_rate);
  r.get("patch_size", c.patch_size);
  r.get("T", c.T);
  r.get("beta_start", c.beta_start);
  r.get("beta_end", c.beta_end);
  if (r.has("net")) {
    json merged = nn::to_json(c.net);
    for (auto& [k, v] : r.raw("net").items()) {
      if (!merged.contains(k)) throw ConfigError(where + ".net: unknown key(s): " + where + ".net." + k);
      merged[k] = v;
    }
    c.net = nn::unet_config_from_json(merged, where + ".net");
  }
  if (r.has("normalizer")) c.normalizer = hu_normalizer_from_json(r.raw("normalizer"), where + ".normalizer");
  std::string target = to_string(c.target);
  r.get("target", target);
  c.target = diffusion_target_from_string(target);
  r.get("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

struct TrainedDDPM {
  nn::UNet<float> net;
  DiffusionSchedule schedule;
  ConditioningScheme scheme;
  HuNormalizer normalizer;
  DiffusionTarget target;
  std::vector<double> loss_history;
  std::optional<nn::Adam<float>> optimizer;
};

/// Aligned conditional/target planes of one group, normalized.
struct ConditionalPair {
  std::vector<std::vector<float>> cond;
  std::vector<float> y0;
  int rows = 0, cols = 0;
  std::string id;
};

inline ConditionalPair make_conditional_pair(const SampleGroup& g, ConditioningScheme scheme, DiffusionTarget target,
                                             const HuNormalizer& n) {
  ConditionalPair p;
  p.id = g.id;
  const auto imgs = conditional_images(g, scheme);
  const auto& names = conditional_channels(scheme);
  const ImageGrid& y = g.require_channel(to_string(target), "dataset");
  p.rows = y.rows();
  p.cols = y.cols();
  for (std::size_t k = 0; k < imgs.size(); ++k) {
    if (!(imgs[k]->geometry() == y.geometry())) throw ConfigError("group '" + g.id + "': channels not aligned");
    std::vector<float> v(imgs[k]->values().size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = normalize_channel(names[k], imgs[k]->values()[i], n);
    p.cond.push_back(std::move(v));
  }
  p.y0.resize(y.values().size());
  for (std::size_t i = 0; i < p.y0.size(); ++i) p.y0[i] = n.to_net(y.values()[i]);
  return p;
}

inline TrainingBatch draw_batch(const std::vector<ConditionalPair>& pairs, const DiffusionSchedule& s, int batch,
                                int patch, Rng& rng) {
  const int C = static_cast<int>(pairs.front().cond.size());
  TrainingBatch b;
  b.cond_shape = {batch, C, patch, patch};
  b.x.resize(b.cond_shape.size());
  b.y0.resize(static_cast<std::size_t>(batch) * patch * patch);
  b.eps.resize(b.y0.size());
  std::normal_distribution<double> nd(0.0, 1.0);
  const std::size_t pp = static_cast<std::size_t>(patch) * patch;
  for (int n = 0; n < batch; ++n) {
    const ConditionalPair& pr = pairs[std::uniform_int_distribution<std::size_t>(0, pairs.size() - 1)(rng)];
    const int r0 = std::uniform_int_distribution<int>(0, pr.rows - patch)(rng);
    const int c0 = std::uniform_int_distribution<int>(0, pr.cols - patch)(rng);
    for (int r = 0; r < patch; ++r)
      for (int c = 0; c < patch; ++c) {
        const std::size_t src = static_cast<std::size_t>(r0 + r) * pr.cols + c0 + c;
        const std::size_t dst = static_cast<std::size_t>(r) * patch + c;
        for (int k = 0; k < C; ++k) b.x[(static_cast<std::size_t>(n) * C + k) * pp + dst] = pr.cond[k][src];
        b.y0[n * pp + dst] = pr.y0[src];
      }
    b.gamma.push_back(sample_gamma(s, rng).gamma);
  }
  for (auto& e : b.eps) e = nd(rng);
  return b;
}

/// Stochastic minimisation of the L1 epsilon-prediction loss.
inline TrainedDDPM train_ddpm(const std::vector<SampleGroup>& groups, ConditioningScheme scheme,
                              DiffusionTrainConfig cfg) {
  cfg.net.in_channels = conditional_channel_count(scheme) + 1;
  cfg.net.global_residual = false;
  cfg.validate();
  if (groups.empty()) throw ConfigError("ddpm training needs at least one sample group");
  std::vector<ConditionalPair> pairs;
  for (const auto& g : groups) {
    pairs.push_back(make_conditional_pair(g, scheme, cfg.target, cfg.normalizer));
    if (pairs.back().rows < cfg.patch_size || pairs.back().cols < cfg.patch_size) {
      throw ConfigError("ddpm patch_size " + std::to_string(cfg.patch_size) + " exceeds group '" + g.id + "'");
    }
  }
  TrainedDDPM m{nn::UNet<float>(cfg.net, derive_seed(cfg.seed, 0)),
                make_schedule(cfg.T, cfg.beta_start, cfg.beta_end),
                scheme,
                cfg.normalizer,
                cfg.target,
                {},
                std::nullopt};
  m.optimizer.emplace(m.net, nn::AdamConfig{.lr = cfg.learning_rate});
  Rng rng = make_rng(derive_seed(cfg.seed, 1));
  m.loss_history.reserve(cfg.iterations);
  for (int it = 0; it < cfg.iterations; ++it) {
    const TrainingBatch b = draw_batch(pairs, m.schedule, cfg.batch_size, cfg.patch_size, rng);
    m.net.zero_grad();
    nn::Var<float> loss;
    try {
      loss = training_loss<float>(m.net, b);
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + " at iteration " + std::to_string(it + 1) +
                           "; training aborted (try a smaller learning_rate)");
    }
    const double l = loss->value[0];
    if (!std::isfinite(l)) {
      throw NumericalError("non-finite ddpm loss at iteration " + std::to_string(it + 1) +
                           "; training aborted (try a smaller learning_rate)");
    }
    nn::backward(loss);
    m.optimizer->step(m.net);
    m.loss_history.push_back(l);
  }
  return m;
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

/// eps_hat for a (1, C+1, h, w) input [cond..., y_t] at noise level gamma.
using EpsilonFn = std::function<std::vector<float>(const std::vector<float>& input, int channels, int h, int w,
                                                   double gamma)>;

/// Reverse diffusion over normalized conditional planes (h x w each); the
/// final step adds no noise. Returns y_0 in network units.
inline std::vector<float> reverse_diffusion(const EpsilonFn& f, const std::vector<std::vector<float>>& cond, int h,
                                            int w, const DiffusionSchedule& s, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  const std::size_t P = static_cast<std::size_t>(h) * w;
  const int C = static_cast<int>(cond.size());
  std::vector<float> in(static_cast<std::size_t>(C + 1) * P);
  for (int k = 0; k < C; ++k) std::copy(cond[k].begin(), cond[k].end(), in.begin() + k * P);
  float* y = in.data() + C * P;
  for (std::size_t i = 0; i < P; ++i) y[i] = static_cast<float>(nd(rng));
  for (int t = s.T; t >= 1; --t) {
    const std::vector<float> eps = f(in, C + 1, h, w, s.gamma[t]);
    if (eps.size() != P) throw ConfigError("epsilon predictor returned the wrong size");
    for (std::size_t i = 0; i < P; ++i) {
      const double z = t > 1 ? nd(rng) : 0.0;
      y[i] = static_cast<float>(reverse_step(y[i], eps[i], s.alpha[t], s.gamma[t], z));
    }
    for (std::size_t i = 0; i < P; ++i)
      if (!std::isfinite(y[i])) throw NumericalError("non-finite sample at step t=" + std::to_string(t));
  }
  return {y, y + P};
}

inline EpsilonFn unet_epsilon(const nn::UNet<float>& net) {
  return [&net](const std::vector<float>& in, int c, int h, int w, double gamma) {
    nn::NoGradGuard ng;
    return net.forward(nn::constant<float>({1, c, h, w}, in), {gamma})->value;
  };
}

/// Super-resolved estimate from conditional HU images (one per scheme channel).
inline ImageGrid sample(const TrainedDDPM& m, const std::vector<const ImageGrid*>& cond, std::uint64_t seed,
                        std::optional<int> steps_override = std::nullopt, const std::string& id = "sample") {
  const auto& names = conditional_channels(m.scheme);
  if (cond.size() != names.size()) {
    throw ConfigError("scheme " + to_string(m.scheme) + " takes " + std::to_string(names.size()) +
                      " conditional channel(s); got " + std::to_string(cond.size()));
  }
  if (m.net.config().in_channels != static_cast<int>(cond.size()) + 1) {
    throw ConfigError("checkpoint network does not match scheme " + to_string(m.scheme));
  }
  const GridGeometry g = cond.front()->geometry();
  for (const auto* c : cond)
    if (!(c->geometry() == g)) throw ConfigError("conditional images are not aligned");
  const int div = m.net.config().divisor();
  const int H = detail::round_up(g.rows, div), W = detail::round_up(g.cols, div);
  std::vector<std::vector<float>> planes;
  for (std::size_t k = 0; k < cond.size(); ++k) {
    std::vector<float> v(cond[k]->values().size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = normalize_channel(names[k], cond[k]->values()[i], m.normalizer);
    planes.push_back(detail::reflect_pad(v, g.rows, g.cols, 0, 0, H, W));
  }
  const DiffusionSchedule s = steps_override ? respace(m.schedule, *steps_override) : m.schedule;
  const std::vector<float> y = reverse_diffusion(unet_epsilon(m.net), planes, H, W, s, seed);
  std::vector<float> out(g.size());
  for (int r = 0; r < g.rows; ++r)
    for (int c = 0; c < g.cols; ++c)
      out[static_cast<std::size_t>(r) * g.cols + c] = quantize_hu(m.normalizer.to_hu(y[static_cast<std::size_t>(r) * W + c]));
  return ImageGrid(g, std::move(out), id);
}

inline ImageGrid sample_group(const TrainedDDPM& m, const SampleGroup& g, std::uint64_t seed,
                              std::optional<int> steps_override = std::nullopt) {
  return sample(m, conditional_images(g, m.scheme), seed, steps_override, g.id + "/sr_" + to_string(m.scheme));
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

inline void save_ddpm(const fs::path& stem, const TrainedDDPM& m, const json& extra = json::object()) {
  json meta = extra;
  meta["kind"] = "ddpm";
  meta["scheme"] = to_string(m.scheme);
  meta["schedule"] = {{"T", m.schedule.T}, {"beta_start", m.schedule.beta_start}, {"beta_end", m.schedule.beta_end}};
  meta["normalizer"] = to_json(m.normalizer);
  meta["target"] = to_string(m.target);
  nn::save_checkpoint(stem, m.net, m.optimizer ? &*m.optimizer : nullptr, meta);
  nn::write_loss_history(fs::path(stem.string() + "_loss.csv"), m.loss_history);
}

inline TrainedDDPM load_ddpm(const fs::path& stem) {
  nn::LoadedCheckpoint c = nn::read_checkpoint(stem);
  if (c.meta.value("kind", "") != "ddpm") throw FormatError(stem.string() + ": not a ddpm checkpoint");
  const json& sj = c.meta.at("schedule");
  TrainedDDPM m{nn::load_network(c),
                make_schedule(sj.at("T").get<int>(), sj.at("beta_start").get<double>(), sj.at("beta_end").get<double>()),
                conditioning_scheme_from_string(c.meta.at("scheme").get<std::string>()),
                hu_normalizer_from_json(c.meta.at("normalizer")),
                diffusion_target_from_string(c.meta.value("target", "noisy_hr")),
                {},
                std::nullopt};
  if (c.has_optimizer_state) {
    m.optimizer.emplace(m.net, nn::AdamConfig{});
    nn::restore_optimizer(c, *m.optimizer);
  }
  return m;
}

}  // namespace pcct
