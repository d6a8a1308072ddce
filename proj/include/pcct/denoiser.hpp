#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "pcct/core/error.hpp"
#include "pcct/core/image_grid.hpp"
#include "pcct/core/json_util.hpp"
#include "pcct/core/rng.hpp"
#include "pcct/dataset.hpp"
#include "pcct/nn/optim.hpp"
#include "pcct/nn/unet.hpp"

namespace pcct {

/// Affine HU <-> network-unit mapping.
struct HuNormalizer {
  double offset = 250.0;
  double scale = 1250.0;

  float to_net(double hu) const { return static_cast<float>((hu - offset) / scale); }
  double to_hu(double v) const { return v * scale + offset; }
  bool operator==(const HuNormalizer&) const = default;
};

inline json to_json(const HuNormalizer& n) { return {{"offset", n.offset}, {"scale", n.scale}}; }

inline HuNormalizer hu_normalizer_from_json(const json& j, const std::string& where = "normalizer") {
  HuNormalizer n;
  StrictReader r(j, where);
  r.get("offset", n.offset);
  r.get("scale", n.scale);
  r.finish();
  require(n.scale > 0, where + ".scale must be positive");
  return n;
}

/// Residual UNet: identity at initialisation, no attention.
inline nn::UNetConfig default_denoiser_net() {
  nn::UNetConfig c;
  c.base_width = 32;
  c.channel_mult = {1, 2, 2};
  c.attention = false;
  c.global_residual = true;
  return c;
}

struct DenoiserTrainConfig {
  int iterations = 10000;
  int batch_size = 8;
  double learning_rate = 1e-5;
  int patch_size = 128;
  // patches are redrawn until this fraction of input pixels exceeds foreground_hu
  double min_foreground_fraction = 0.0;
  double foreground_hu = -900.0;
  nn::UNetConfig net = default_denoiser_net();
  HuNormalizer normalizer;
  std::uint64_t seed = 0;

  void validate() const {
    require(iterations > 0, "denoiser iterations must be positive");
    require(batch_size > 0, "denoiser batch_size must be positive");
    require(learning_rate > 0, "denoiser learning_rate must be positive");
    require(patch_size > 0, "denoiser patch_size must be positive");
    require(min_foreground_fraction >= 0 && min_foreground_fraction <= 1,
            "denoiser min_foreground_fraction must be in [0, 1]");
    require(patch_size % net.divisor() == 0,
            "denoiser patch_size must be divisible by " + std::to_string(net.divisor()));
    require(net.out_channels == 1, "denoiser must have one output channel");
    net.validate();
  }
};

inline json to_json(const DenoiserTrainConfig& c) {
  return {{"iterations", c.iterations},       {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
          {"patch_size", c.patch_size},       {"min_foreground_fraction", c.min_foreground_fraction},
          {"foreground_hu", c.foreground_hu}, {"net", nn::to_json(c.net)},  {"normalizer", to_json(c.normalizer)},
          {"seed", c.seed}};
}

inline DenoiserTrainConfig denoiser_train_config_from_json(const json& j, const std::string& where = "denoiser") {
  DenoiserTrainConfig c;
  StrictReader r(j, where);
  r.get("iterations", c.iterations);
  r.get("batch_size", c.batch_size);
  r.get("learning_rate", c.learning_rate);
  r.get("patch_size", c.patch_size);
  r.get("min_foreground_fraction", c.min_foreground_fraction);
  r.get("foreground_hu", c.foreground_hu);
  if (r.has("net")) {
    nn::UNetConfig base = c.net;
    json merged = nn::to_json(base);
    for (auto& [k, v] : r.raw("net").items()) {
      if (!merged.contains(k)) throw ConfigError(where + ".net: unknown key(s): " + where + ".net." + k);
      merged[k] = v;
    }
    c.net = nn::unet_config_from_json(merged, where + ".net");
  }
  if (r.has("normalizer")) c.normalizer = hu_normalizer_from_json(r.raw("normalizer"), where + ".normalizer");
  r.get("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

struct TrainedDenoiser {
  nn::UNet<float> net;
  HuNormalizer normalizer;
  std::vector<double> loss_history;  // per-iteration MSE in HU^2
  std::string kind;
};

/// Input/target image pair sharing one raster.
struct ImagePair {
  const ImageGrid* input;
  const ImageGrid* target;
};

namespace detail {

inline void copy_patch(const ImageGrid& img, int r0, int c0, int p, const HuNormalizer& n, float* dst) {
  for (int r = 0; r < p; ++r)
    for (int c = 0; c < p; ++c) dst[static_cast<std::size_t>(r) * p + c] = n.to_net(img.at(r0 + r, c0 + c));
}

inline double foreground_fraction(const ImageGrid& img, int r0, int c0, int p, double threshold_hu) {
  int n = 0;
  for (int r = r0; r < r0 + p; ++r)
    for (int c = c0; c < c0 + p; ++c) n += img.at(r, c) > threshold_hu;
  return static_cast<double>(n) / (static_cast<double>(p) * p);
}

}  // namespace detail

/// MSE regression of target patches from input patches with Adam.
inline TrainedDenoiser train_denoiser_on_pairs(const std::vector<ImagePair>& pairs, const DenoiserTrainConfig& cfg,
                                               const std::string& kind) {
  cfg.validate();
  if (pairs.empty()) throw ConfigError(kind + ": no training pairs");
  if (cfg.net.in_channels != 1) {
    throw ConfigError(kind + ": training pairs are single-channel but net.in_channels is " +
                      std::to_string(cfg.net.in_channels));
  }
  const int p = cfg.patch_size;
  for (const auto& pr : pairs) {
    if (!(pr.input->geometry() == pr.target->geometry())) throw ConfigError(kind + ": input/target not aligned");
    if (pr.input->rows() < p || pr.input->cols() < p) {
      throw ConfigError(kind + ": patch_size " + std::to_string(p) + " exceeds image '" + pr.input->id() + "'");
    }
  }
  TrainedDenoiser out{nn::UNet<float>(cfg.net, derive_seed(cfg.seed, 0)), cfg.normalizer, {}, kind};
  nn::Adam<float> opt(out.net, {.lr = cfg.learning_rate});
  Rng rng = make_rng(derive_seed(cfg.seed, 1));
  const nn::Shape shape{cfg.batch_size, 1, p, p};
  std::vector<float> xin(shape.size()), xt(shape.size());
  const double hu2 = cfg.normalizer.scale * cfg.normalizer.scale;
  constexpr int kMaxPatchAttempts = 64;
  out.loss_history.reserve(cfg.iterations);
  for (int it = 0; it < cfg.iterations; ++it) {
    for (int b = 0; b < cfg.batch_size; ++b) {
      const ImagePair* pick = nullptr;
      int r0 = 0, c0 = 0;
      for (int attempt = 0; attempt < kMaxPatchAttempts; ++attempt) {
        pick = &pairs[std::uniform_int_distribution<std::size_t>(0, pairs.size() - 1)(rng)];
        r0 = std::uniform_int_distribution<int>(0, pick->input->rows() - p)(rng);
        c0 = std::uniform_int_distribution<int>(0, pick->input->cols() - p)(rng);
        if (detail::foreground_fraction(*pick->input, r0, c0, p, cfg.foreground_hu) >= cfg.min_foreground_fraction)
          break;
      }
      const ImagePair& pr = *pick;
      detail::copy_patch(*pr.input, r0, c0, p, cfg.normalizer, xin.data() + static_cast<std::size_t>(b) * p * p);
      detail::copy_patch(*pr.target, r0, c0, p, cfg.normalizer, xt.data() + static_cast<std::size_t>(b) * p * p);
    }
    out.net.zero_grad();
    auto loss = nn::mse_loss(out.net.forward(nn::constant<float>(shape, xin)), nn::constant<float>(shape, xt));
    const double l = loss->value[0];
    if (!std::isfinite(l)) throw NumericalError(kind + ": non-finite loss at iteration " + std::to_string(it + 1));
    nn::backward(loss);
    opt.step(out.net);
    out.loss_history.push_back(l * hu2);
  }
  return out;
}

/// Self-supervised LR denoiser: lr_a -> lr_b (independent noise).
inline TrainedDenoiser train_lr_denoiser(const std::vector<SampleGroup>& groups, const DenoiserTrainConfig& cfg) {
  std::vector<ImagePair> pairs;
  for (const auto& g : groups)
    pairs.push_back({&g.require_channel("lr_a", "dataset"), &g.require_channel("lr_b", "dataset")});
  return train_denoiser_on_pairs(pairs, cfg, "lr-denoiser");
}

/// Supervised HR denoiser: noisy_hr -> clean_hr.
inline TrainedDenoiser train_hr_denoiser(const std::vector<SampleGroup>& groups, const DenoiserTrainConfig& cfg) {
  std::vector<ImagePair> pairs;
  for (const auto& g : groups)
    pairs.push_back({&g.require_channel("noisy_hr", "dataset"), &g.require_channel("clean_hr", "dataset")});
  return train_denoiser_on_pairs(pairs, cfg, "hr-denoiser");
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

struct TileOptions {
  int tile = 128;
  int overlap = 32;
  int margin = 16;  // reflective border added before tiling

  void validate(int divisor) const {
    require(tile > 0 && tile % divisor == 0, "tile size must be a positive multiple of " + std::to_string(divisor));
    require(overlap >= 0 && overlap < tile, "tile overlap must be in [0, tile)");
    require(margin >= 0, "tile margin must be non-negative");
  }
};

namespace detail {

inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i = ((i % period) + period) % period;
  return i < n ? i : period - i;
}

/// Plane padded by `top/left` before and up to (rows, cols) after, reflecting.
inline std::vector<float> reflect_pad(std::span<const float> v, int h, int w, int top, int left, int rows, int cols) {
  std::vector<float> out(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    const int sr = reflect_index(r - top, h);
    for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(r) * cols + c] = v[static_cast<std::size_t>(sr) * w + reflect_index(c - left, w)];
  }
  return out;
}

inline int round_up(int x, int m) { return (x + m - 1) / m * m; }

/// Tile origins covering [0, n) with windows of `tile` and stride tile - overlap.
inline std::vector<int> tile_starts(int n, int tile, int overlap) {
  std::vector<int> s;
  if (n <= tile) return {0};
  const int stride = tile - overlap;
  for (int x = 0;; x += stride) {
    if (x + tile >= n) {
      s.push_back(n - tile);
      break;
    }
    s.push_back(x);
  }
  return s;
}

/// Raised-cosine ramps over the first and last `overlap` samples.
inline std::vector<double> blend_window(int tile, int overlap) {
  std::vector<double> w(tile, 1.0);
  for (int i = 0; i < overlap && i < tile; ++i) {
    const double v = 0.5 - 0.5 * std::cos(std::numbers::pi * (i + 0.5) / overlap);
    w[i] = std::min(w[i], v);
    w[tile - 1 - i] = std::min(w[tile - 1 - i], v);
  }
  return w;
}

}  // namespace detail

/// Runs a single-channel network over stacked planes (channels x h x w),
/// tiled with overlap blending; returns one HU plane.
inline std::vector<float> run_tiled(const nn::UNet<float>& net, const std::vector<std::vector<float>>& planes, int h,
                                    int w, const TileOptions& opt) {
  const int div = net.config().divisor();
  opt.validate(div);
  const int C = static_cast<int>(planes.size());
  if (C != net.config().in_channels) throw ConfigError("network expects " + std::to_string(net.config().in_channels) + " input channels");
  const int H = std::max(detail::round_up(h + 2 * opt.margin, div), h + 2 * opt.margin);
  const int W = std::max(detail::round_up(w + 2 * opt.margin, div), w + 2 * opt.margin);
  std::vector<std::vector<float>> padded;
  for (const auto& pl : planes) padded.push_back(detail::reflect_pad(pl, h, w, opt.margin, opt.margin, H, W));
  const int th = std::min(opt.tile, H), tw = std::min(opt.tile, W);
  const int TH = H <= opt.tile ? H : th, TW = W <= opt.tile ? W : tw;
  const auto rows = detail::tile_starts(H, TH, opt.overlap), cols = detail::tile_starts(W, TW, opt.overlap);
  const auto wr = detail::blend_window(TH, H <= opt.tile ? 0 : opt.overlap);
  const auto wc = detail::blend_window(TW, W <= opt.tile ? 0 : opt.overlap);
  std::vector<double> acc(static_cast<std::size_t>(H) * W, 0.0), wsum(acc.size(), 0.0);
  nn::NoGradGuard ng;
  for (int r0 : rows)
    for (int c0 : cols) {
      std::vector<float> x(static_cast<std::size_t>(C) * TH * TW);
      for (int ch = 0; ch < C; ++ch)
        for (int r = 0; r < TH; ++r)
          std::copy_n(padded[ch].begin() + static_cast<std::size_t>(r0 + r) * W + c0, TW,
                      x.begin() + (static_cast<std::size_t>(ch) * TH + r) * TW);
      auto y = net.forward(nn::constant<float>({1, C, TH, TW}, std::move(x)));
      for (int r = 0; r < TH; ++r)
        for (int c = 0; c < TW; ++c) {
          const double wt = wr[r] * wc[c];
          const std::size_t k = static_cast<std::size_t>(r0 + r) * W + c0 + c;
          acc[k] += wt * y->value[static_cast<std::size_t>(r) * TW + c];
          wsum[k] += wt;
        }
    }
  std::vector<float> out(static_cast<std::size_t>(h) * w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const std::size_t k = static_cast<std::size_t>(r + opt.margin) * W + c + opt.margin;
      out[static_cast<std::size_t>(r) * w + c] = static_cast<float>(acc[k] / wsum[k]);
    }
  return out;
}

/// Network estimate of the clean image, in HU.
inline ImageGrid apply_denoiser(const TrainedDenoiser& d, const ImageGrid& img, const TileOptions& opt = {}) {
  std::vector<float> x(img.values().size());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = d.normalizer.to_net(img.values()[i]);
  std::vector<float> y = run_tiled(d.net, {x}, img.rows(), img.cols(), opt);
  for (auto& v : y) v = static_cast<float>(d.normalizer.to_hu(v));
  check_finite<float>(y, "denoiser output");
  return ImageGrid(img.geometry(), std::move(y), img.id() + "/denoised");
}

/// (denoised, noise) with denoised + noise == img bitwise.
inline SplitResult denoise(const TrainedDenoiser& d, const ImageGrid& img, const TileOptions& opt = {}) {
  return decompose(img, apply_denoiser(d, img, opt));
}

inline DenoiseFn as_denoise_fn(const TrainedDenoiser& d, TileOptions opt = {}) {
  return [&d, opt](const ImageGrid& img) { return apply_denoiser(d, img, opt); };
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

inline void save_denoiser(const fs::path& stem, const TrainedDenoiser& d, const nn::Adam<float>* opt = nullptr,
                          const json& extra = json::object()) {
  json meta = extra;
  meta["kind"] = d.kind;
  meta["normalizer"] = to_json(d.normalizer);
  nn::save_checkpoint(stem, d.net, opt, meta);
  nn::write_loss_history(fs::path(stem.string() + "_loss.csv"), d.loss_history);
}

inline TrainedDenoiser load_denoiser(const fs::path& stem) {
  nn::LoadedCheckpoint c = nn::read_checkpoint(stem);
  TrainedDenoiser d{nn::load_network(c), {}, {}, c.meta.value("kind", "")};
  if (c.meta.contains("normalizer")) d.normalizer = hu_normalizer_from_json(c.meta["normalizer"]);
  if (d.net.config().out_channels != 1) throw FormatError(stem.string() + ": not a denoiser checkpoint");
  return d;
}

}  // namespace pcct
