#include <gtest/gtest.h>

#include <cmath>

#include "pcct/phantom.hpp"
#include "pcct/recon.hpp"
#include "pcct/simulator.hpp"
#include "support/stats.hpp"

using namespace pcct;

namespace {

constexpr double kMuWater = 0.02;

ImageGrid disk_image(double radius, double hu = 0.0, double cy = 0.0, double cx = 0.0) {
  PhantomSpec s;
  s.kind = PhantomKind::UniformDisk;
  s.disk_radius_mm = radius;
  s.disk_hu = hu;
  s.disk_cy_mm = cy;
  s.disk_cx_mm = cx;
  return render_phantom(s, 0);
}

ReconConfig config_for(const ImageGrid& img) {
  ReconConfig c;
  c.grid = img.geometry();
  c.mu_water = kMuWater;
  return c;
}

std::vector<double> values_in_radius(const ImageGrid& img, double radius) {
  std::vector<double> v;
  const auto& g = img.geometry();
  for (int r = 0; r < g.rows; ++r)
    for (int c = 0; c < g.cols; ++c)
      if (std::hypot(g.y(r), g.x(c)) < radius) v.push_back(img.at(r, c));
  return v;
}

}  // namespace

TEST(Fbp, ZeroSinogramGivesAir) {
  ImageGrid ref = disk_image(10);
  ScanGeometry g;
  g.n_views = 90;
  Sinogram s{g, std::vector<double>(static_cast<std::size_t>(g.n_views) * g.n_channels, 0.0), json::object()};
  ImageGrid out = fbp(s, config_for(ref));
  for (float v : out.values()) ASSERT_EQ(v, -1000.0f);
}

TEST(Fbp, UniformDiskInteriorIsWater) {
  ImageGrid img = disk_image(50);
  ScanGeometry g;
  Sinogram s = project(hu_to_mu(img, kMuWater), g);
  ImageGrid rec = fbp(s, config_for(img));
  auto interior = values_in_radius(rec, 45);
  EXPECT_NEAR(oracle::mean(interior), 0.0, 10.0);  // 1% of mu_water
}

TEST(Fbp, FanFlatUniformDisk) {
  ImageGrid img = disk_image(50);
  ScanGeometry g;
  g.mode = ScanMode::FanFlat;
  g.n_views = 720;
  g.n_channels = 700;
  g.detector_pitch_mm = 0.6;
  Sinogram s = project(hu_to_mu(img, kMuWater), g);
  ImageGrid rec = fbp(s, config_for(img));
  auto interior = values_in_radius(rec, 45);
  EXPECT_NEAR(oracle::mean(interior), 0.0, 10.0);
  EXPECT_LT(oracle::stddev(interior), 20.0);
}

TEST(Fbp, Linearity) {
  ImageGrid a = disk_image(30, 200, 10, -5), b = disk_image(20, 1000, -15, 12);
  ScanGeometry g;
  g.n_views = 180;
  Sinogram s1 = project(hu_to_mu(a, kMuWater), g), s2 = project(hu_to_mu(b, kMuWater), g);
  Sinogram sum = s1;
  for (std::size_t i = 0; i < sum.values.size(); ++i) sum.values[i] += s2.values[i];
  auto cfg = config_for(a);
  auto r1 = fbp_mu(s1, cfg), r2 = fbp_mu(s2, cfg), r12 = fbp_mu(sum, cfg);
  double scale = 0;
  for (double v : r12) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < r12.size(); ++i) ASSERT_NEAR(r12[i], r1[i] + r2[i], 1e-4 * scale);
}

TEST(Fbp, RotationCovariance) {
  // asymmetric object; shifting the sinogram by a quarter turn rotates the image by 90 degrees
  PhantomSpec spec;
  ImageGrid img = render_phantom(spec, 3);
  ScanGeometry g;
  g.n_views = 720;
  Sinogram s = project(hu_to_mu(img, kMuWater), g);
  Sinogram shifted = s;
  const int m = g.n_views / 4;
  for (int k = 0; k < g.n_views; ++k)
    for (int j = 0; j < g.n_channels; ++j)
      shifted.values[static_cast<std::size_t>(k) * g.n_channels + j] = s.at((k + m) % g.n_views, j);
  auto cfg = config_for(img);
  ImageGrid rec = fbp(s, cfg), rot = fbp(shifted, cfg);
  const int n = img.rows();
  double se = 0, lo = 1e9, hi = -1e9;
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      const double expect = rec.at(c, n - 1 - r);
      const double d = rot.at(r, c) - expect;
      se += d * d;
      lo = std::min(lo, expect);
      hi = std::max(hi, expect);
    }
  const double rmse = std::sqrt(se / (n * n));
  EXPECT_LT(rmse, 0.02 * (hi - lo));
}

TEST(Fbp, SmoothPhantomRoundTrip) {
  // noiseless, no degradation: interior RMSE < 3% of dynamic range
  ImageGrid img = disk_image(50, 0);
  ImageGrid inner = disk_image(20, 300, 10, 10);
  std::vector<float> v(img.values().begin(), img.values().end());
  for (std::size_t i = 0; i < v.size(); ++i)
    if (inner.values()[i] > 0) v[i] = inner.values()[i];
  ImageGrid ph(img.geometry(), v);
  ScanGeometry g;
  Sinogram s = project(hu_to_mu(ph, kMuWater), g);
  ImageGrid rec = fbp(s, config_for(ph));
  double se = 0;
  int n = 0;
  for (int r = 0; r < ph.rows(); ++r)
    for (int c = 0; c < ph.cols(); ++c)
      if (std::hypot(ph.geometry().y(r), ph.geometry().x(c)) < 45) {
        double d = rec.at(r, c) - ph.at(r, c);
        se += d * d;
        ++n;
      }
  EXPECT_LT(std::sqrt(se / n), 0.03 * 1300.0);
}

TEST(Fbp, NoiseScalesWithFlux) {
  ImageGrid img = disk_image(50);
  ScanGeometry g;
  Sinogram clean = project(hu_to_mu(img, kMuWater), g);
  std::vector<double> scaled;
  for (double n0 : {1e3, 1e4, 1e5}) {
    DegradationModel m;
    m.crosstalk = 0;
    m.focal_spot_fwhm_mm = 0;
    m.photons_per_mas = n0 * g.n_views / (m.tube_current_ma * m.exposure_time_s);
    m.seed = 4;
    ImageGrid rec = fbp(degrade_and_count(clean, m), config_for(img));
    scaled.push_back(oracle::stddev(values_in_radius(rec, 20)) * std::sqrt(n0));
  }
  for (double s : scaled) EXPECT_NEAR(s / scaled[1], 1.0, 0.10);
}

TEST(Fbp, HannApodisationLowersNoise) {
  ImageGrid img = disk_image(50);
  ScanGeometry g;
  DegradationModel m;
  m.crosstalk = 0;
  m.focal_spot_fwhm_mm = 0;
  Sinogram noisy = degrade_and_count(project(hu_to_mu(img, kMuWater), g), m);
  auto cfg = config_for(img);
  double ramp = oracle::stddev(values_in_radius(fbp(noisy, cfg), 20));
  cfg.filter = ReconFilter::HannApodized;
  double hann = oracle::stddev(values_in_radius(fbp(noisy, cfg), 20));
  EXPECT_LT(hann, 0.8 * ramp);
}

TEST(Fbp, RejectsGeometryMismatch) {
  ImageGrid img = disk_image(10);
  ScanGeometry g;
  g.n_views = 10;
  g.n_channels = 40;  // covers 20 mm; grid needs 64 mm
  Sinogram s{g, std::vector<double>(400, 0.0), json::object()};
  EXPECT_THROW(fbp(s, config_for(img)), ConfigError);
  ScanGeometry ok;
  Sinogram bad{ok, std::vector<double>(10, 0.0), json::object()};
  EXPECT_THROW(fbp(bad, config_for(img)), ConfigError);
}
