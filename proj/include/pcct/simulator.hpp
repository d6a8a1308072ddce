#pragma once

// Monoenergetic degradation forward model: line integrals through an
// attenuation map, focal-spot blur, charge-sharing cross-talk on expected
// counts, Poisson counting noise and the log transform.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "pcct/core/error.hpp"
#include "pcct/core/image_grid.hpp"
#include "pcct/core/json_util.hpp"
#include "pcct/core/raw_io.hpp"
#include "pcct/core/rng.hpp"

namespace pcct {

enum class ScanMode { Parallel, FanFlat };

inline std::string to_string(ScanMode m) { return m == ScanMode::Parallel ? "parallel" : "fan-flat"; }

struct ScanGeometry {
  ScanMode mode = ScanMode::Parallel;
  int n_views = 720;  // over 360 degrees
  int n_channels = 512;
  double detector_pitch_mm = 1.0;  // at isocentre (parallel) or detector plane (fan)
  double source_to_iso_mm = 540.0;
  double source_to_detector_mm = 950.0;

  double view_angle(int k) const { return 2.0 * std::numbers::pi * k / n_views; }
  double channel_u(double j) const { return (j - 0.5 * (n_channels - 1)) * detector_pitch_mm; }
  double magnification() const { return mode == ScanMode::FanFlat ? source_to_detector_mm / source_to_iso_mm : 1.0; }
  /// Radius about the isocentre seen by every view.
  double fov_radius() const {
    const double umax = 0.5 * n_channels * detector_pitch_mm;
    if (mode == ScanMode::Parallel) return umax;
    return source_to_iso_mm * std::sin(std::atan(umax / source_to_detector_mm));
  }
  bool undersampled() const { return n_views < 2.0 * n_channels / std::numbers::pi; }

  void validate() const {
    require(n_views >= 1 && n_channels >= 1, "scan geometry needs at least one view and channel");
    require(detector_pitch_mm > 0, "detector pitch must be positive");
    if (mode == ScanMode::FanFlat) {
      require(source_to_iso_mm > 0 && source_to_detector_mm > source_to_iso_mm,
              "fan geometry needs 0 < source_to_iso < source_to_detector");
    }
  }
  friend bool operator==(const ScanGeometry&, const ScanGeometry&) = default;
};

struct DegradationModel {
  double tube_current_ma = 220.0;
  double exposure_time_s = 1.0;  // per rotation
  double photons_per_mas = 1.0e5;
  double focal_spot_fwhm_mm = 1.0;
  double crosstalk = 0.1;
  std::uint64_t seed = 0;
  bool poisson_noise = true;

  /// Expected unattenuated counts per channel per view.
  double unattenuated_counts(int n_views) const {
    return tube_current_ma * (exposure_time_s / n_views) * photons_per_mas;
  }
  friend bool operator==(const DegradationModel&, const DegradationModel&) = default;
};

inline json to_json(const ScanGeometry& g) {
  return {{"mode", to_string(g.mode)},
          {"n_views", g.n_views},
          {"n_channels", g.n_channels},
          {"detector_pitch_mm", g.detector_pitch_mm},
          {"source_to_iso_mm", g.source_to_iso_mm},
          {"source_to_detector_mm", g.source_to_detector_mm}};
}

inline ScanGeometry scan_geometry_from_json(const json& j, const std::string& where = "geometry") {
  StrictReader r(j, where);
  ScanGeometry g;
  std::string mode = to_string(g.mode);
  r.get("mode", mode);
  if (mode == "parallel") g.mode = ScanMode::Parallel;
  else if (mode == "fan-flat") g.mode = ScanMode::FanFlat;
  else throw ConfigError(where + ".mode: expected 'parallel' or 'fan-flat'");
  r.get("n_views", g.n_views);
  r.get("n_channels", g.n_channels);
  r.get("detector_pitch_mm", g.detector_pitch_mm);
  r.get("source_to_iso_mm", g.source_to_iso_mm);
  r.get("source_to_detector_mm", g.source_to_detector_mm);
  r.finish();
  g.validate();
  return g;
}

inline json to_json(const DegradationModel& m) {
  return {{"tube_current_ma", m.tube_current_ma},   {"exposure_time_s", m.exposure_time_s},
          {"photons_per_mas", m.photons_per_mas},   {"focal_spot_fwhm_mm", m.focal_spot_fwhm_mm},
          {"crosstalk", m.crosstalk},               {"seed", m.seed},
          {"poisson_noise", m.poisson_noise}};
}

inline DegradationModel degradation_from_json(const json& j, const std::string& where = "degradation") {
  StrictReader r(j, where);
  DegradationModel m;
  r.get("tube_current_ma", m.tube_current_ma);
  r.get("exposure_time_s", m.exposure_time_s);
  r.get("photons_per_mas", m.photons_per_mas);
  r.get("focal_spot_fwhm_mm", m.focal_spot_fwhm_mm);
  r.get("crosstalk", m.crosstalk);
  r.get("seed", m.seed);
  r.get("poisson_noise", m.poisson_noise);
  r.finish();
  return m;
}

/// Log-attenuation line integrals, views x channels.
struct Sinogram {
  ScanGeometry geometry;
  std::vector<double> values;
  json provenance = json::object();

  double at(int view, int ch) const { return values[static_cast<std::size_t>(view) * geometry.n_channels + ch]; }
  std::span<const double> view(int k) const {
    return {values.data() + static_cast<std::size_t>(k) * geometry.n_channels,
            static_cast<std::size_t>(geometry.n_channels)};
  }
};

namespace detail {

/// Joseph-style line integral through a piecewise-linear interpolation of the
/// map: step along the dominant axis one pixel at a time, interpolate along
/// the other. (px, py) is any point on the line, (ux, uy) the unit direction.
inline double joseph_line_integral(const AttenuationMap& mu, double px, double py, double ux, double uy) {
  const GridGeometry& g = mu.geometry();
  const auto v = mu.values();
  double sum = 0.0;
  if (std::abs(ux) / g.dx >= std::abs(uy) / g.dy) {
    const double slope = uy / ux;
    for (int c = 0; c < g.cols; ++c) {
      const double x = g.x(c);
      const double y = py + (x - px) * slope;
      const double rf = g.row_of(y);
      const int r0 = static_cast<int>(std::floor(rf));
      if (r0 < -1 || r0 >= g.rows) continue;
      const double w = rf - r0;
      double a = (r0 >= 0) ? v[static_cast<std::size_t>(r0) * g.cols + c] : 0.0;
      double b = (r0 + 1 < g.rows) ? v[static_cast<std::size_t>(r0 + 1) * g.cols + c] : 0.0;
      sum += (1 - w) * a + w * b;
    }
    return sum * g.dx / std::abs(ux);
  }
  const double slope = ux / uy;
  for (int r = 0; r < g.rows; ++r) {
    const double y = g.y(r);
    const double x = px + (y - py) * slope;
    const double cf = g.col_of(x);
    const int c0 = static_cast<int>(std::floor(cf));
    if (c0 < -1 || c0 >= g.cols) continue;
    const double w = cf - c0;
    const std::size_t row = static_cast<std::size_t>(r) * g.cols;
    double a = (c0 >= 0) ? v[row + c0] : 0.0;
    double b = (c0 + 1 < g.cols) ? v[row + c0 + 1] : 0.0;
    sum += (1 - w) * a + w * b;
  }
  return sum * g.dy / std::abs(uy);
}

/// Largest distance from the isocentre of any pixel with non-zero attenuation.
inline double support_radius(const AttenuationMap& mu) {
  const GridGeometry& g = mu.geometry();
  const double half = 0.5 * std::hypot(g.dx, g.dy);
  double rmax = 0.0;
  for (int r = 0; r < g.rows; ++r)
    for (int c = 0; c < g.cols; ++c)
      if (mu.at(r, c) > 0) rmax = std::max(rmax, std::hypot(g.y(r), g.x(c)) + half);
  return rmax;
}

inline std::vector<double> gaussian_kernel(double sigma) {
  const int half = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> k(2 * half + 1);
  double s = 0;
  for (int i = -half; i <= half; ++i) s += k[i + half] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& x : k) x /= s;
  return k;
}

}  // namespace detail

/// Ray geometry: view angle beta, central direction (cos b, sin b) in (x, y),
/// detector axis (-sin b, cos b). Fan sources sit at -D*(cos b, sin b).
inline Sinogram project(const AttenuationMap& mu, const ScanGeometry& geom) {
  geom.validate();
  const double support = detail::support_radius(mu);
  if (support > geom.fov_radius() + 1e-9) {
    throw ConfigError("object support radius " + std::to_string(support) + " mm exceeds scan field of view " +
                      std::to_string(geom.fov_radius()) + " mm");
  }
  if (geom.mode == ScanMode::FanFlat && geom.source_to_iso_mm <= mu.geometry().max_radius()) {
    throw ConfigError("fan source lies inside the image raster");
  }
  Sinogram s{geom, std::vector<double>(static_cast<std::size_t>(geom.n_views) * geom.n_channels, 0.0), json::object()};
  for (int k = 0; k < geom.n_views; ++k) {
    const double b = geom.view_angle(k);
    const double cx = std::cos(b), cy = std::sin(b);
    const double ex = -cy, ey = cx;
    double* row = s.values.data() + static_cast<std::size_t>(k) * geom.n_channels;
    for (int j = 0; j < geom.n_channels; ++j) {
      const double u = geom.channel_u(j);
      if (geom.mode == ScanMode::Parallel) {
        row[j] = detail::joseph_line_integral(mu, u * ex, u * ey, cx, cy);
      } else {
        const double D = geom.source_to_iso_mm, Dd = geom.source_to_detector_mm;
        const double sx = -D * cx, sy = -D * cy;
        const double qx = (Dd - D) * cx + u * ex, qy = (Dd - D) * cy + u * ey;
        const double len = std::hypot(qx - sx, qy - sy);
        row[j] = detail::joseph_line_integral(mu, sx, sy, (qx - sx) / len, (qy - sy) / len);
      }
    }
  }
  return s;
}

/// Per view: Gaussian focal-spot blur of the line integrals, expected counts
/// N0*exp(-p), cross-talk kernel [a, 1-2a, a] on the expected counts,
/// Poisson sampling and p = -ln(max(N, 0.5)/N0).
inline Sinogram degrade_and_count(const Sinogram& sino, const DegradationModel& m) {
  const ScanGeometry& g = sino.geometry;
  const double n0 = m.unattenuated_counts(g.n_views);
  if (!(n0 > 0) || !std::isfinite(n0)) throw ConfigError("expected unattenuated counts N0 must be positive");
  require(m.crosstalk >= 0 && m.crosstalk < 0.5, "cross-talk fraction must lie in [0, 0.5)");
  require(m.focal_spot_fwhm_mm >= 0, "focal spot FWHM must be non-negative");

  const int nc = g.n_channels;
  std::vector<double> kernel;
  if (m.focal_spot_fwhm_mm > 0) {
    const double sigma = m.focal_spot_fwhm_mm / (2.0 * std::sqrt(2.0 * std::log(2.0))) / g.detector_pitch_mm;
    kernel = detail::gaussian_kernel(sigma);
  }
  const int half = static_cast<int>(kernel.size()) / 2;
  const double a = m.crosstalk;

  Sinogram out{g, std::vector<double>(sino.values.size()), sino.provenance};
  std::vector<double> p(nc), nbar(nc), shared(nc);
  for (int k = 0; k < g.n_views; ++k) {
    auto in = sino.view(k);
    if (kernel.empty()) {
      std::copy(in.begin(), in.end(), p.begin());
    } else {
      for (int j = 0; j < nc; ++j) {
        double acc = 0;
        for (int t = -half; t <= half; ++t) acc += kernel[t + half] * in[std::clamp(j + t, 0, nc - 1)];
        p[j] = acc;
      }
    }
    for (int j = 0; j < nc; ++j) nbar[j] = n0 * std::exp(-p[j]);
    if (a > 0) {
      // scatter form; charge leaving the detector edge stays in its pixel
      std::fill(shared.begin(), shared.end(), 0.0);
      for (int j = 0; j < nc; ++j) {
        shared[j] += (1.0 - 2.0 * a) * nbar[j];
        shared[j > 0 ? j - 1 : j] += a * nbar[j];
        shared[j + 1 < nc ? j + 1 : j] += a * nbar[j];
      }
      std::swap(shared, nbar);
    }
    double* row = out.values.data() + static_cast<std::size_t>(k) * nc;
    if (m.poisson_noise) {
      Rng rng(derive_seed(m.seed, static_cast<std::uint64_t>(k)));
      for (int j = 0; j < nc; ++j) {
        std::poisson_distribution<long long> pd(nbar[j]);
        const double n = nbar[j] > 0 ? static_cast<double>(pd(rng)) : 0.0;
        row[j] = -std::log(std::max(n, 0.5) / n0);
      }
    } else {
      for (int j = 0; j < nc; ++j) row[j] = -std::log(std::max(nbar[j], 0.5) / n0);
    }
  }
  out.provenance["degradation"] = to_json(m);
  out.provenance["n0"] = n0;
  return out;
}

enum class Protocol { LR, HR };

inline constexpr double kLrTubeCurrentMa = 220.0;
inline constexpr double kHrTubeCurrentMa = 350.0;

/// LR: the base model at 220 mA. HR: 350 mA, half the focal spot, twice the
/// views and no cross-talk.
inline std::pair<DegradationModel, ScanGeometry> make_protocol(Protocol which, DegradationModel base,
                                                               ScanGeometry geom) {
  if (which == Protocol::LR) {
    base.tube_current_ma = kLrTubeCurrentMa;
    return {base, geom};
  }
  base.tube_current_ma = kHrTubeCurrentMa;
  base.focal_spot_fwhm_mm *= 0.5;
  base.crosstalk = 0.0;
  geom.n_views *= 2;
  return {base, geom};
}

inline void save_sinogram(const Sinogram& s, const fs::path& path) {
  RawArray a;
  a.geometry = {s.geometry.n_views, s.geometry.n_channels, 360.0 / s.geometry.n_views, s.geometry.detector_pitch_mm,
                0.0, s.geometry.channel_u(0)};
  a.values.assign(s.values.begin(), s.values.end());
  a.id = "sinogram";
  a.hu_convention = "none";
  a.extra = {{"geometry", to_json(s.geometry)}, {"provenance", s.provenance}};
  save_raw(a, path);
}

inline Sinogram load_sinogram(const fs::path& path) {
  RawArray a = load_raw(path);
  if (!a.extra.contains("geometry")) throw FormatError(path.string() + ": sidecar lacks scan geometry");
  Sinogram s;
  s.geometry = scan_geometry_from_json(a.extra["geometry"]);
  if (s.geometry.n_views != a.geometry.rows || s.geometry.n_channels != a.geometry.cols) {
    throw FormatError(path.string() + ": sinogram shape does not match its scan geometry");
  }
  s.values.assign(a.values.begin(), a.values.end());
  s.provenance = a.extra.value("provenance", json::object());
  return s;
}

}  // namespace pcct
