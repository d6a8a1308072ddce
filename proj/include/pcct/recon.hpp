#pragma once

// Filtered back-projection onto an arbitrary raster (by default the phantom
// raster), parallel and flat-panel fan geometries.

#include <bit>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "pcct/core/error.hpp"
#include "pcct/core/fft.hpp"
#include "pcct/core/image_grid.hpp"
#include "pcct/core/json_util.hpp"
#include "pcct/simulator.hpp"

namespace pcct {

enum class ReconFilter { RamLak, HannApodized };
enum class ReconInterp { Nearest, Linear };

struct ReconConfig {
  ReconFilter filter = ReconFilter::RamLak;
  ReconInterp interpolation = ReconInterp::Linear;
  GridGeometry grid;  // output raster
  double mu_water = 0.02;
};

inline json to_json(const ReconConfig& c) {
  return {{"filter", c.filter == ReconFilter::RamLak ? "ram-lak" : "hann-apodized"},
          {"interpolation", c.interpolation == ReconInterp::Linear ? "linear" : "nearest"},
          {"mu_water", c.mu_water}};
}

/// Reads filter/interpolation/mu_water; the output raster is supplied by the
/// caller (it defaults to the phantom raster).
inline ReconConfig recon_config_from_json(const json& j, const std::string& where = "recon") {
  StrictReader r(j, where);
  ReconConfig c;
  std::string filter = "ram-lak", interp = "linear";
  r.get("filter", filter);
  r.get("interpolation", interp);
  r.get("mu_water", c.mu_water);
  r.finish();
  if (filter == "ram-lak") c.filter = ReconFilter::RamLak;
  else if (filter == "hann-apodized") c.filter = ReconFilter::HannApodized;
  else throw ConfigError(where + ".filter: expected 'ram-lak' or 'hann-apodized'");
  if (interp == "linear") c.interpolation = ReconInterp::Linear;
  else if (interp == "nearest") c.interpolation = ReconInterp::Nearest;
  else throw ConfigError(where + ".interpolation: expected 'linear' or 'nearest'");
  require(c.mu_water > 0, where + ".mu_water must be positive");
  return c;
}

namespace detail {

inline int ramp_padding(int n_channels) {
  return static_cast<int>(std::bit_ceil(static_cast<unsigned>(2 * n_channels)));
}

/// Frequency response of the band-limited (spatial-domain) ramp kernel of
/// sample spacing tau, optionally Hann-apodised, on an n_pad-point grid.
inline std::vector<double> ramp_response(int n_pad, double tau, ReconFilter filter) {
  std::vector<double> h(n_pad, 0.0);
  h[0] = 1.0 / (4.0 * tau * tau);
  for (int n = 1; n < n_pad / 2; ++n) {
    if (n % 2 == 1) {
      const double v = -1.0 / (std::numbers::pi * std::numbers::pi * n * n * tau * tau);
      h[n] = v;
      h[n_pad - n] = v;
    }
  }
  RealFft1d fft(n_pad);
  auto H = fft.forward(h);
  std::vector<double> resp(H.size());
  for (std::size_t k = 0; k < H.size(); ++k) {
    double w = 1.0;
    if (filter == ReconFilter::HannApodized) w = 0.5 * (1.0 + std::cos(std::numbers::pi * k / (n_pad / 2)));
    resp[k] = H[k].real() * w * tau;  // tau: Riemann-sum weight of the convolution
  }
  return resp;
}

inline double sample_view(std::span<const double> q, double j, ReconInterp interp) {
  const int n = static_cast<int>(q.size());
  if (interp == ReconInterp::Nearest) {
    const int i = static_cast<int>(std::lround(j));
    return (i >= 0 && i < n) ? q[i] : 0.0;
  }
  const int i0 = static_cast<int>(std::floor(j));
  if (i0 < -1 || i0 >= n) return 0.0;
  const double w = j - i0;
  const double a = i0 >= 0 ? q[i0] : 0.0;
  const double b = i0 + 1 < n ? q[i0 + 1] : 0.0;
  return (1 - w) * a + w * b;
}

}  // namespace detail

/// FBP in attenuation units (1/mm), row-major over cfg.grid.
inline std::vector<double> fbp_mu(const Sinogram& sino, const ReconConfig& cfg) {
  const ScanGeometry& g = sino.geometry;
  g.validate();
  cfg.grid.validate();
  if (sino.values.size() != static_cast<std::size_t>(g.n_views) * g.n_channels) {
    throw ConfigError("sinogram payload does not match its geometry");
  }
  const double inscribed = std::min(0.5 * cfg.grid.rows * cfg.grid.dy, 0.5 * cfg.grid.cols * cfg.grid.dx);
  if (inscribed > g.fov_radius() + 1e-9) {
    throw ConfigError("reconstruction grid (" + std::to_string(inscribed) + " mm) exceeds the scan field of view (" +
                      std::to_string(g.fov_radius()) + " mm)");
  }

  const int nc = g.n_channels;
  const bool fan = g.mode == ScanMode::FanFlat;
  const double D = g.source_to_iso_mm;
  const double tau = fan ? g.detector_pitch_mm * D / g.source_to_detector_mm : g.detector_pitch_mm;
  const int n_pad = detail::ramp_padding(nc);
  const auto resp = detail::ramp_response(n_pad, tau, cfg.filter);
  RealFft1d fft(n_pad);

  const GridGeometry& out = cfg.grid;
  std::vector<double> mu(out.size(), 0.0);
  std::vector<double> weighted(nc), q(nc);
  std::vector<double> sv(nc);
  for (int j = 0; j < nc; ++j) sv[j] = (j - 0.5 * (nc - 1)) * tau;

  for (int k = 0; k < g.n_views; ++k) {
    auto p = sino.view(k);
    for (int j = 0; j < nc; ++j) weighted[j] = fan ? p[j] * D / std::sqrt(D * D + sv[j] * sv[j]) : p[j];
    fft.filter(weighted, resp, q);

    const double b = g.view_angle(k);
    const double cb = std::cos(b), sb = std::sin(b);
    const double center = 0.5 * (nc - 1);
    for (int r = 0; r < out.rows; ++r) {
      const double y = out.y(r);
      double* dst = mu.data() + static_cast<std::size_t>(r) * out.cols;
      for (int c = 0; c < out.cols; ++c) {
        const double x = out.x(c);
        const double s_par = -x * sb + y * cb;
        if (!fan) {
          dst[c] += detail::sample_view(q, s_par / tau + center, cfg.interpolation);
        } else {
          const double L = D + x * cb + y * sb;
          const double s = D * s_par / L;
          dst[c] += (D * D) / (L * L) * detail::sample_view(q, s / tau + center, cfg.interpolation);
        }
      }
    }
  }
  const double scale = std::numbers::pi / g.n_views;
  for (double& v : mu) v *= scale;
  return mu;
}

inline ImageGrid fbp(const Sinogram& sino, const ReconConfig& cfg, std::string id = {}) {
  auto mu = fbp_mu(sino, cfg);
  for (double v : mu)
    if (!std::isfinite(v)) throw NumericalError("reconstruction produced non-finite values");
  return mu_values_to_hu(cfg.grid, mu, cfg.mu_water, std::move(id));
}

}  // namespace pcct
