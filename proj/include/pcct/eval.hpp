#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pcct/core/error.hpp"
#include "pcct/core/fft.hpp"
#include "pcct/core/image_grid.hpp"
#include "pcct/core/json_util.hpp"
#include "pcct/core/raw_io.hpp"
#include "pcct/core/svg.hpp"

namespace pcct {

// ---------------------------------------------------------------------------
// MTF (slanted edge)
// ---------------------------------------------------------------------------

/// Region holding a straight edge. angle_deg is the edge line direction
/// measured from the column (vertical) axis; the phantom edge uses the same
/// convention.
struct EdgeSpec {
  Roi roi;
  double angle_deg = 3.0;
  double angle_tolerance_deg = 5.0;
  double max_residual_px = 1.0;       // RMS of per-line edge positions about the fitted line
  double max_frequency_per_px = 1.0;  // highest reported frequency, cycles per pixel
  double half_window_px = 0.0;        // ESF half-width; 0 = as wide as the region allows
};

struct MTFCurve {
  std::vector<double> frequencies;  // 1/mm
  std::vector<double> modulation;
  std::optional<double> mtf50;
  std::optional<double> mtf10;
  double edge_angle_deg = 0.0;  // fitted
  double fit_residual_px = 0.0;
};

class EdgeNotDetected : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

namespace detail {

inline double sinc(double x) {
  if (std::abs(x) < 1e-12) return 1.0;
  const double a = std::numbers::pi * x;
  return std::sin(a) / a;
}

/// First frequency where the curve drops to `level`, by linear interpolation.
inline std::optional<double> crossing(const std::vector<double>& f, const std::vector<double>& m, double level) {
  for (std::size_t i = 1; i < f.size(); ++i) {
    if (m[i - 1] >= level && m[i] < level) {
      const double t = (m[i - 1] - level) / (m[i - 1] - m[i]);
      return f[i - 1] + t * (f[i] - f[i - 1]);
    }
  }
  return std::nullopt;
}

/// Region values laid out so that the edge runs along the rows (near-vertical
/// edge); near-horizontal edges are transposed.
struct EdgeFrame {
  int lines = 0;   // along the edge
  int across = 0;  // across the edge
  double d_line = 0, d_across = 0;
  std::vector<double> v;
  double at(int i, int j) const { return v[static_cast<std::size_t>(i) * across + j]; }
};

inline EdgeFrame edge_frame(const ImageGrid& img, const Roi& roi, bool transpose) {
  EdgeFrame f;
  const auto& g = img.geometry();
  if (!transpose) {
    f.lines = roi.h;
    f.across = roi.w;
    f.d_line = g.dy;
    f.d_across = g.dx;
  } else {
    f.lines = roi.w;
    f.across = roi.h;
    f.d_line = g.dx;
    f.d_across = g.dy;
  }
  f.v.resize(static_cast<std::size_t>(f.lines) * f.across);
  for (int i = 0; i < f.lines; ++i)
    for (int j = 0; j < f.across; ++j)
      f.v[static_cast<std::size_t>(i) * f.across + j] =
          transpose ? img.at(roi.row + j, roi.col + i) : img.at(roi.row + i, roi.col + j);
  return f;
}

}  // namespace detail

/// Edge-method MTF: per-line edge centroids, least-squares edge line,
/// projection onto the edge normal into bins of pixel/oversample, central
/// difference LSF, direct DFT normalised at DC. The derivative and bin
/// apertures are divided out.
inline MTFCurve mtf_edge(const ImageGrid& img, const EdgeSpec& spec, int oversample = 4) {
  require(oversample >= 1 && oversample <= 32, "mtf oversample must be in [1, 32]");
  require(spec.roi.inside(img.geometry()), "mtf edge region lies outside image '" + img.id() + "'");
  require(spec.roi.h >= 16 && spec.roi.w >= 16, "mtf edge region must be at least 16x16 px");
  double a = std::fmod(std::abs(spec.angle_deg), 180.0);
  const bool transpose = a > 45.0 && a < 135.0;
  detail::EdgeFrame f = detail::edge_frame(img, spec.roi, transpose);

  // per-line edge position: centroid of |derivative| around its maximum
  std::vector<double> grad(static_cast<std::size_t>(f.lines) * f.across, 0.0);
  double gmax = 0;
  for (int i = 0; i < f.lines; ++i)
    for (int j = 1; j + 1 < f.across; ++j) {
      double d = std::abs(f.at(i, j + 1) - f.at(i, j - 1));
      grad[static_cast<std::size_t>(i) * f.across + j] = d;
      gmax = std::max(gmax, d);
    }
  if (!(gmax > 0)) throw EdgeNotDetected("no edge in region of image '" + img.id() + "'");
  std::vector<double> ys, xs;
  for (int i = 0; i < f.lines; ++i) {
    const double* gi = &grad[static_cast<std::size_t>(i) * f.across];
    int jmax = static_cast<int>(std::max_element(gi, gi + f.across) - gi);
    if (gi[jmax] < 0.2 * gmax) continue;
    double s = 0, sw = 0;
    for (int j = std::max(1, jmax - 4); j <= std::min(f.across - 2, jmax + 4); ++j) {
      s += gi[j] * j;
      sw += gi[j];
    }
    ys.push_back(i * f.d_line);
    xs.push_back(s / sw * f.d_across);
  }
  if (ys.size() < 8) throw EdgeNotDetected("edge found on too few lines in image '" + img.id() + "'");
  // x = c0 + c1 y
  const double n = static_cast<double>(ys.size());
  double my = 0, mx = 0;
  for (std::size_t k = 0; k < ys.size(); ++k) my += ys[k] / n, mx += xs[k] / n;
  double syy = 0, sxy = 0;
  for (std::size_t k = 0; k < ys.size(); ++k) {
    syy += (ys[k] - my) * (ys[k] - my);
    sxy += (ys[k] - my) * (xs[k] - mx);
  }
  const double c1 = sxy / syy, c0 = mx - c1 * my;
  double rss = 0;
  for (std::size_t k = 0; k < ys.size(); ++k) rss += std::pow(xs[k] - c0 - c1 * ys[k], 2);
  const double residual_px = std::sqrt(rss / n) / f.d_across;
  if (residual_px > spec.max_residual_px) {
    throw EdgeNotDetected("edge not detected in image '" + img.id() + "': line-fit residual " +
                          std::to_string(residual_px) + " px exceeds " + std::to_string(spec.max_residual_px));
  }
  const double fitted_deg = std::atan(c1) * 180.0 / std::numbers::pi;
  // declared angle in the frame's own convention
  double declared = transpose ? 90.0 - spec.angle_deg : spec.angle_deg;
  declared = std::remainder(declared, 180.0);
  if (std::abs(std::remainder(fitted_deg - declared, 180.0)) > spec.angle_tolerance_deg) {
    throw EdgeNotDetected("edge in image '" + img.id() + "' fitted at " + std::to_string(fitted_deg) +
                          " deg, declared " + std::to_string(declared) + " deg");
  }

  // signed distance to the edge line for every pixel
  const double norm = std::sqrt(1.0 + c1 * c1);
  std::vector<double> dist(f.v.size());
  double dmin = INFINITY, dmax = -INFINITY;
  for (int i = 0; i < f.lines; ++i)
    for (int j = 0; j < f.across; ++j) {
      double d = (j * f.d_across - c0 - c1 * i * f.d_line) / norm;
      dist[static_cast<std::size_t>(i) * f.across + j] = d;
      dmin = std::min(dmin, d);
      dmax = std::max(dmax, d);
    }
  const double pixel = f.d_across;
  double W = std::min(-dmin, dmax) - pixel;
  if (spec.half_window_px > 0) W = std::min(W, spec.half_window_px * pixel);
  if (!(W > 4 * pixel)) throw EdgeNotDetected("edge too close to the region border in image '" + img.id() + "'");
  const double delta = pixel / oversample;
  const int nbins = static_cast<int>(std::floor(2 * W / delta));
  std::vector<double> sum(nbins, 0.0), cnt(nbins, 0.0), at(nbins, 0.0);
  for (std::size_t k = 0; k < dist.size(); ++k) {
    const double pos = (dist[k] + W) / delta;
    if (pos < 0) continue;
    const int b = static_cast<int>(pos);
    if (b >= nbins) continue;
    sum[b] += f.v[k];
    at[b] += pos;
    cnt[b] += 1;
  }
  // bin means sit at the mean sample position, not the bin centre; resample
  // onto the centres so the uneven phase coverage does not act as jitter
  std::vector<double> px_pos, px_val;
  for (int b = 0; b < nbins; ++b)
    if (cnt[b] > 0) {
      px_pos.push_back(at[b] / cnt[b]);
      px_val.push_back(sum[b] / cnt[b]);
    }
  if (px_pos.size() < 8) throw EdgeNotDetected("edge spread function is empty for image '" + img.id() + "'");
  std::vector<double> esf(nbins);
  for (int b = 0, k = 0; b < nbins; ++b) {
    const double c = b + 0.5;
    while (k + 2 < static_cast<int>(px_pos.size()) && px_pos[k + 1] < c) ++k;
    if (c <= px_pos.front()) {
      esf[b] = px_val.front();
    } else if (c >= px_pos.back()) {
      esf[b] = px_val.back();
    } else {
      const double t = (c - px_pos[k]) / (px_pos[k + 1] - px_pos[k]);
      esf[b] = px_val[k] + t * (px_val[k + 1] - px_val[k]);
    }
  }
  std::vector<double> lsf(nbins, 0.0);
  for (int b = 1; b + 1 < nbins; ++b) lsf[b] = 0.5 * (esf[b + 1] - esf[b - 1]);

  MTFCurve out;
  out.edge_angle_deg = transpose ? 90.0 - fitted_deg : fitted_deg;
  out.fit_residual_px = residual_px;
  const double df = 1.0 / (nbins * delta);
  const double fmax = spec.max_frequency_per_px / pixel;
  std::complex<double> dc = 0;
  for (int b = 0; b < nbins; ++b) dc += lsf[b];
  if (!(std::abs(dc) > 0)) throw EdgeNotDetected("edge has zero contrast in image '" + img.id() + "'");
  for (int k = 0; k * df <= fmax + 1e-12; ++k) {
    const double fr = k * df;
    std::complex<double> acc = 0;
    for (int b = 0; b < nbins; ++b) {
      if (lsf[b] == 0.0) continue;
      acc += lsf[b] * std::polar(1.0, -2.0 * std::numbers::pi * fr * (b + 0.5) * delta);
    }
    double m = std::abs(acc) / std::abs(dc);
    const double aperture = detail::sinc(2 * fr * delta) * detail::sinc(fr * delta);
    if (k > 0 && std::abs(aperture) > 0.1) m /= aperture;
    out.frequencies.push_back(fr);
    out.modulation.push_back(k == 0 ? 1.0 : m);
  }
  out.mtf50 = detail::crossing(out.frequencies, out.modulation, 0.5);
  out.mtf10 = detail::crossing(out.frequencies, out.modulation, 0.1);
  return out;
}

inline json to_json(const MTFCurve& m) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"frequencies_per_mm", m.frequencies},
          {"modulation", m.modulation},
          {"mtf50_per_mm", opt(m.mtf50)},
          {"mtf10_per_mm", opt(m.mtf10)},
          {"edge_angle_deg", m.edge_angle_deg},
          {"fit_residual_px", m.fit_residual_px}};
}

// ---------------------------------------------------------------------------
// Noise power spectrum
// ---------------------------------------------------------------------------

enum class Taper { None, Hann };

inline std::string to_string(Taper t) { return t == Taper::Hann ? "hann" : "none"; }
inline Taper taper_from_string(const std::string& s) {
  if (s == "hann") return Taper::Hann;
  if (s == "none") return Taper::None;
  throw ConfigError("unknown taper '" + s + "' (expected hann|none)");
}

struct RadialPSD {
  std::vector<double> frequencies;     // bin centres, 1/mm
  std::vector<double> power_fraction;  // radially averaged power, percent of the sum over bins
  double low_frequency_fraction = 0;   // share of non-DC noise power below a quarter of Nyquist
  double noise_std = 0;                // std of the detrended patch
  bool zero_noise = false;
};

/// Least-squares polynomial surface of total degree `order`, subtracted.
inline std::vector<double> detrend(const Patch& p, int order) {
  require(order >= 0 && order <= 3, "detrend order must be in [0, 3]");
  std::vector<std::pair<int, int>> terms;
  for (int d = 0; d <= order; ++d)
    for (int i = 0; i <= d; ++i) terms.emplace_back(d - i, i);
  const int n = p.h * p.w;
  Eigen::MatrixXd A(n, static_cast<int>(terms.size()));
  Eigen::VectorXd b(n);
  for (int r = 0; r < p.h; ++r)
    for (int c = 0; c < p.w; ++c) {
      const int k = r * p.w + c;
      // centred, unit-scaled coordinates keep the system well conditioned
      const double y = (r - 0.5 * (p.h - 1)) / p.h, x = (c - 0.5 * (p.w - 1)) / p.w;
      for (std::size_t t = 0; t < terms.size(); ++t)
        A(k, static_cast<int>(t)) = std::pow(y, terms[t].first) * std::pow(x, terms[t].second);
      b(k) = p.values[static_cast<std::size_t>(k)];
    }
  Eigen::VectorXd coef = A.colPivHouseholderQr().solve(b);
  Eigen::VectorXd res = b - A * coef;
  return std::vector<double>(res.data(), res.data() + n);
}

inline RadialPSD noise_psd(const Patch& p, double dy, double dx, int detrend_order = 1, Taper taper = Taper::Hann) {
  const std::string name = p.source_id.empty() ? "patch" : "patch of '" + p.source_id + "'";
  if (p.h < 32 || p.w < 32) {
    throw ConfigError(name + " at (" + std::to_string(p.row) + ", " + std::to_string(p.col) + ") is " +
                      std::to_string(p.h) + "x" + std::to_string(p.w) + "; the noise PSD needs at least 32x32");
  }
  require(dy > 0 && dx > 0, "PSD spacing must be positive");
  require(p.values.size() == static_cast<std::size_t>(p.h) * p.w, "patch payload does not match its shape");
  std::vector<double> v = detrend(p, detrend_order);
  double var = 0, scale = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    var += v[i] * v[i];
    scale = std::max(scale, std::abs(static_cast<double>(p.values[i])));
  }
  var /= static_cast<double>(v.size());

  RadialPSD out;
  out.noise_std = std::sqrt(var);
  const double cell = 1.0 / std::max(p.h * dy, p.w * dx);
  const double nyq = 0.5 / std::max(dy, dx);
  const int nbins = static_cast<int>(std::floor(nyq / cell + 0.5)) + 1;
  for (int b = 0; b < nbins; ++b) out.frequencies.push_back(b * cell);

  // floating-point residue of a constant patch
  if (out.noise_std <= 1e-9 * std::max(1.0, scale)) {
    out.zero_noise = true;
    out.power_fraction.assign(nbins, 0.0);
    out.power_fraction[0] = 100.0;
    return out;
  }
  if (taper == Taper::Hann) {
    for (int r = 0; r < p.h; ++r)
      for (int c = 0; c < p.w; ++c) {
        const double wr = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * (r + 0.5) / p.h);
        const double wc = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * (c + 0.5) / p.w);
        v[static_cast<std::size_t>(r) * p.w + c] *= wr * wc;
      }
  }
  std::vector<double> P = power_spectrum_2d(v, p.h, p.w);
  std::vector<double> sum(nbins, 0.0), cnt(nbins, 0.0);
  double low = 0, total = 0;
  for (int r = 0; r < p.h; ++r)
    for (int c = 0; c < p.w; ++c) {
      const int kr = r <= p.h / 2 ? r : r - p.h, kc = c <= p.w / 2 ? c : c - p.w;
      const double fy = kr / (p.h * dy), fx = kc / (p.w * dx);
      const double rho = std::hypot(fy, fx);
      const double pw = P[static_cast<std::size_t>(r) * p.w + c];
      if (kr != 0 || kc != 0) {
        total += pw;
        if (rho < 0.25 * nyq) low += pw;
      }
      const int b = static_cast<int>(std::floor(rho / cell + 0.5));
      if (b < nbins) {
        sum[b] += pw;
        cnt[b] += 1;
      }
    }
  out.low_frequency_fraction = total > 0 ? low / total : 0.0;
  double acc = 0;
  out.power_fraction.resize(nbins);
  for (int b = 0; b < nbins; ++b) {
    out.power_fraction[b] = cnt[b] > 0 ? sum[b] / cnt[b] : 0.0;
    acc += out.power_fraction[b];
  }
  for (auto& x : out.power_fraction) x = 100.0 * x / acc;
  return out;
}

inline json to_json(const RadialPSD& p) {
  return {{"frequencies_per_mm", p.frequencies},
          {"power_fraction_percent", p.power_fraction},
          {"low_frequency_fraction", p.low_frequency_fraction},
          {"noise_std", p.noise_std},
          {"zero_noise", p.zero_noise}};
}

// ---------------------------------------------------------------------------
// Reference metrics
// ---------------------------------------------------------------------------

struct ReferenceMetrics {
  double psnr = 0;  // dB; +inf for identical images
  double ssim = 0;
  double rmse = 0;  // HU
};

inline json to_json(const ReferenceMetrics& m) {
  return {{"psnr_db", std::isinf(m.psnr) ? json("+inf") : json(m.psnr)}, {"ssim", m.ssim}, {"rmse_hu", m.rmse}};
}

namespace detail {

/// Normalised 1D Gaussian taps.
inline std::vector<double> gaussian_taps(int size, double sigma) {
  std::vector<double> w(size);
  double s = 0;
  for (int i = 0; i < size; ++i) {
    const double x = i - 0.5 * (size - 1);
    w[i] = std::exp(-x * x / (2 * sigma * sigma));
    s += w[i];
  }
  for (auto& x : w) x /= s;
  return w;
}

/// Valid-mode separable filtering of an h x w field.
inline std::vector<double> filter_valid(const std::vector<double>& a, int h, int w, const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int oh = h - n + 1, ow = w - n + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow), out(static_cast<std::size_t>(oh) * ow);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < ow; ++c) {
      double s = 0;
      for (int i = 0; i < n; ++i) s += k[i] * a[static_cast<std::size_t>(r) * w + c + i];
      tmp[static_cast<std::size_t>(r) * ow + c] = s;
    }
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c) {
      double s = 0;
      for (int i = 0; i < n; ++i) s += k[i] * tmp[static_cast<std::size_t>(r + i) * ow + c];
      out[static_cast<std::size_t>(r) * ow + c] = s;
    }
  return out;
}

}  // namespace detail

/// SSIM with an 11-px Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
/// averaged over the valid region.
inline double ssim(const std::vector<double>& x, const std::vector<double>& y, int h, int w, double range) {
  require(h >= 11 && w >= 11, "SSIM needs at least 11x11 px");
  const auto k = detail::gaussian_taps(11, 1.5);
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  auto mx = detail::filter_valid(x, h, w, k), my = detail::filter_valid(y, h, w, k);
  auto sxx = detail::filter_valid(xx, h, w, k), syy = detail::filter_valid(yy, h, w, k),
       sxy = detail::filter_valid(xy, h, w, k);
  const double c1 = std::pow(0.01 * range, 2), c2 = std::pow(0.03 * range, 2);
  double acc = 0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
    acc += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return acc / static_cast<double>(mx.size());
}

/// PSNR over a declared dynamic range, SSIM and RMSE inside `roi` (whole
/// image when absent).
inline ReferenceMetrics reference_metrics(const ImageGrid& pred, const ImageGrid& target,
                                          std::optional<Roi> roi = std::nullopt, double dynamic_range = 2500.0) {
  if (!(pred.geometry() == target.geometry())) {
    throw ConfigError("images '" + pred.id() + "' and '" + target.id() + "' are not aligned");
  }
  require(dynamic_range > 0, "dynamic range must be positive");
  const Roi r = roi.value_or(Roi{0, 0, pred.rows(), pred.cols()});
  require(r.inside(pred.geometry()), "metric region lies outside the image");
  std::vector<double> a, b;
  a.reserve(static_cast<std::size_t>(r.h) * r.w);
  b.reserve(a.capacity());
  double se = 0;
  for (int i = r.row; i < r.row + r.h; ++i)
    for (int j = r.col; j < r.col + r.w; ++j) {
      a.push_back(pred.at(i, j));
      b.push_back(target.at(i, j));
      se += std::pow(a.back() - b.back(), 2);
    }
  ReferenceMetrics m;
  m.rmse = std::sqrt(se / static_cast<double>(a.size()));
  m.psnr = m.rmse == 0 ? std::numeric_limits<double>::infinity() : 20.0 * std::log10(dynamic_range / m.rmse);
  m.ssim = (r.h >= 11 && r.w >= 11) ? ssim(a, b, r.h, r.w, dynamic_range) : std::numeric_limits<double>::quiet_NaN();
  return m;
}

// ---------------------------------------------------------------------------
// Scheme comparison
// ---------------------------------------------------------------------------

struct CompareConfig {
  EdgeSpec edge;
  Roi uniform_roi;
  int oversample = 4;
  int detrend_order = 1;
  Taper taper = Taper::Hann;
  double dynamic_range = 2500.0;
};

inline json to_json(const CompareConfig& c) {
  auto roi = [](const Roi& r) { return json{{"row", r.row}, {"col", r.col}, {"h", r.h}, {"w", r.w}}; };
  return {{"edge",
           {{"roi", roi(c.edge.roi)},
            {"angle_deg", c.edge.angle_deg},
            {"angle_tolerance_deg", c.edge.angle_tolerance_deg},
            {"max_residual_px", c.edge.max_residual_px},
            {"max_frequency_per_px", c.edge.max_frequency_per_px},
            {"half_window_px", c.edge.half_window_px}}},
          {"uniform_roi", roi(c.uniform_roi)},
          {"oversample", c.oversample},
          {"detrend_order", c.detrend_order},
          {"taper", to_string(c.taper)},
          {"dynamic_range_hu", c.dynamic_range}};
}

struct SchemeResult {
  std::string name;
  bool present = false;
  std::optional<MTFCurve> mtf;
  std::optional<RadialPSD> psd;
  std::optional<ReferenceMetrics> metrics;
  std::vector<std::string> errors;
};

struct ComparisonReport {
  std::vector<SchemeResult> rows;
  std::vector<std::string> warnings;
  json checks = json::object();
};

struct NamedImage {
  std::string name;
  std::optional<ImageGrid> image;
};

namespace detail {

inline SchemeResult evaluate_one(const std::string& name, const ImageGrid& img, const ImageGrid& target,
                                 const CompareConfig& cfg) {
  SchemeResult r;
  r.name = name;
  r.present = true;
  try {
    r.mtf = mtf_edge(img, cfg.edge, cfg.oversample);
  } catch (const ConfigError& e) {
    r.errors.push_back(std::string("mtf: ") + e.what());
  }
  try {
    r.psd = noise_psd(to_patch(img, cfg.uniform_roi), img.geometry().dy, img.geometry().dx, cfg.detrend_order,
                      cfg.taper);
  } catch (const ConfigError& e) {
    r.errors.push_back(std::string("psd: ") + e.what());
  }
  r.metrics = reference_metrics(img, target, std::nullopt, cfg.dynamic_range);
  return r;
}

}  // namespace detail

/// Per-scheme MTF, uniform-region PSD and reference metrics against the HR
/// target, plus the input and target themselves as reference rows. Missing
/// outputs produce a warning and an empty row.
inline ComparisonReport compare_schemes(const std::vector<NamedImage>& outputs, const ImageGrid& lr_input,
                                        const ImageGrid& hr_target, const CompareConfig& cfg) {
  if (!(lr_input.geometry() == hr_target.geometry())) {
    throw ConfigError("input '" + lr_input.id() + "' and target '" + hr_target.id() + "' are not aligned");
  }
  ComparisonReport rep;
  rep.rows.push_back(detail::evaluate_one("lr_input", lr_input, hr_target, cfg));
  rep.rows.push_back(detail::evaluate_one("hr_target", hr_target, hr_target, cfg));
  for (const auto& o : outputs) {
    if (!o.image) {
      rep.warnings.push_back("missing output for scheme '" + o.name + "'");
      rep.rows.push_back(SchemeResult{o.name, false, {}, {}, {}, {}});
      continue;
    }
    if (!(o.image->geometry() == hr_target.geometry())) {
      throw ConfigError("output of scheme '" + o.name + "' is not aligned with the target");
    }
    rep.rows.push_back(detail::evaluate_one(o.name, *o.image, hr_target, cfg));
  }
  for (const auto& r : rep.rows)
    for (const auto& e : r.errors) rep.warnings.push_back(r.name + ": " + e);

  auto find = [&](const std::string& n) -> const SchemeResult* {
    for (const auto& r : rep.rows)
      if (r.name == n && r.psd) return &r;
    return nullptr;
  };
  // expected direction: plain conditioning concentrates noise power at low frequencies
  if (const SchemeResult* plain = find("plain")) {
    for (const char* other : {"noise_split", "denoise_only"}) {
      const SchemeResult* o = find(other);
      if (!o) continue;
      rep.checks[std::string("low_frequency_fraction_plain_gt_") + other] = {
          {"plain", plain->psd->low_frequency_fraction},
          {other, o->psd->low_frequency_fraction},
          {"holds", plain->psd->low_frequency_fraction > o->psd->low_frequency_fraction}};
      rep.checks[std::string("noise_std_plain_lt_") + other] = {
          {"plain", plain->psd->noise_std},
          {other, o->psd->noise_std},
          {"holds", plain->psd->noise_std < o->psd->noise_std}};
    }
  }
  return rep;
}

inline json to_json(const ComparisonReport& rep) {
  json rows = json::array();
  for (const auto& r : rep.rows) {
    json j = {{"name", r.name}, {"present", r.present}, {"errors", r.errors}};
    j["mtf50_per_mm"] = r.mtf && r.mtf->mtf50 ? json(*r.mtf->mtf50) : json(nullptr);
    j["mtf10_per_mm"] = r.mtf && r.mtf->mtf10 ? json(*r.mtf->mtf10) : json(nullptr);
    j["low_frequency_fraction"] = r.psd ? json(r.psd->low_frequency_fraction) : json(nullptr);
    j["noise_std_hu"] = r.psd ? json(r.psd->noise_std) : json(nullptr);
    j["metrics"] = r.metrics ? to_json(*r.metrics) : json(nullptr);
    rows.push_back(j);
  }
  return {{"rows", rows}, {"warnings", rep.warnings}, {"checks", rep.checks}};
}

namespace detail {

inline std::string num(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

}  // namespace detail

/// Writes mtf.csv, psd.csv, summary.json and the two SVG plots.
inline void write_report(const ComparisonReport& rep, const std::filesystem::path& dir, const json& extra = {}) {
  std::filesystem::create_directories(dir);
  std::string mtf = "scheme,frequency_per_mm,modulation\n", psd = "scheme,frequency_per_mm,power_percent\n";
  std::vector<PlotSeries> mtf_plot, psd_plot;
  for (const auto& r : rep.rows) {
    if (r.mtf) {
      for (std::size_t i = 0; i < r.mtf->frequencies.size(); ++i)
        mtf += r.name + "," + detail::num(r.mtf->frequencies[i]) + "," + detail::num(r.mtf->modulation[i]) + "\n";
      mtf_plot.push_back({r.name, r.mtf->frequencies, r.mtf->modulation});
    }
    if (r.psd) {
      for (std::size_t i = 0; i < r.psd->frequencies.size(); ++i)
        psd += r.name + "," + detail::num(r.psd->frequencies[i]) + "," + detail::num(r.psd->power_fraction[i]) +
               "\n";
      psd_plot.push_back({r.name, r.psd->frequencies, r.psd->power_fraction});
    }
  }
  detail::write_text(dir / "mtf.csv", mtf);
  detail::write_text(dir / "psd.csv", psd);
  json summary = to_json(rep);
  if (!extra.is_null()) summary["context"] = extra;
  write_json(dir / "summary.json", summary);
  write_line_plot(dir / "mtf.svg", "MTF", "frequency (1/mm)", "modulation", mtf_plot);
  write_line_plot(dir / "psd.svg", "Noise PSD", "frequency (1/mm)", "% total power", psd_plot);
}

}  // namespace pcct
