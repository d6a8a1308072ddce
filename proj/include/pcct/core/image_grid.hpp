#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pcct/core/error.hpp"
#include "pcct/core/rng.hpp"

namespace pcct {

inline constexpr double kHuAir = -1000.0;
inline constexpr double kHuWater = 0.0;

/// Raster description shared by every image-like array. Pixel (r, c) has its
/// centre at (y0 + r*dy, x0 + c*dx) in millimetres.
struct GridGeometry {
  int rows = 0;
  int cols = 0;
  double dy = 1.0;
  double dx = 1.0;
  double y0 = 0.0;
  double x0 = 0.0;

  /// Raster whose centre sits on the physical origin (the isocentre).
  static GridGeometry centered(int rows, int cols, double dy, double dx) {
    return {rows, cols, dy, dx, -0.5 * (rows - 1) * dy, -0.5 * (cols - 1) * dx};
  }

  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
  double y(double r) const { return y0 + r * dy; }
  double x(double c) const { return x0 + c * dx; }
  double row_of(double y_mm) const { return (y_mm - y0) / dy; }
  double col_of(double x_mm) const { return (x_mm - x0) / dx; }
  double center_row() const { return 0.5 * (rows - 1); }
  double center_col() const { return 0.5 * (cols - 1); }
  /// Half-diagonal of the raster extent in mm, measured from the isocentre.
  double max_radius() const {
    double ymax = std::max(std::abs(y(-0.5)), std::abs(y(rows - 0.5)));
    double xmax = std::max(std::abs(x(-0.5)), std::abs(x(cols - 0.5)));
    return std::hypot(ymax, xmax);
  }

  void validate() const {
    require(rows > 0 && cols > 0, "grid shape must be positive");
    require(dy > 0 && dx > 0 && std::isfinite(dy) && std::isfinite(dx),
            "grid spacing must be strictly positive");
    require(std::isfinite(y0) && std::isfinite(x0), "grid origin must be finite");
  }

  friend bool operator==(const GridGeometry&, const GridGeometry&) = default;
};

/// Rectangular pixel region [row, row+h) x [col, col+w).
struct Roi {
  int row = 0;
  int col = 0;
  int h = 0;
  int w = 0;

  bool inside(const GridGeometry& g) const {
    return row >= 0 && col >= 0 && h > 0 && w > 0 && row + h <= g.rows && col + w <= g.cols;
  }
  friend bool operator==(const Roi&, const Roi&) = default;
};

template <class T>
void check_finite(std::span<const T> v, const std::string& what) {
  for (const T& x : v) {
    if (!std::isfinite(x)) throw NumericalError(what + ": non-finite value");
  }
}

/// 2D scalar field in Hounsfield units.
class ImageGrid {
 public:
  ImageGrid() = default;
  ImageGrid(GridGeometry geom, std::vector<float> values, std::string id = {})
      : geom_(geom), values_(std::move(values)), id_(std::move(id)) {
    geom_.validate();
    if (values_.size() != geom_.size()) throw ConfigError("image values do not match grid shape");
    check_finite<float>(values_, "image '" + id_ + "'");
  }

  static ImageGrid filled(GridGeometry geom, float value, std::string id = {}) {
    return ImageGrid(geom, std::vector<float>(geom.size(), value), std::move(id));
  }

  const GridGeometry& geometry() const { return geom_; }
  int rows() const { return geom_.rows; }
  int cols() const { return geom_.cols; }
  const std::string& id() const { return id_; }
  void set_id(std::string id) { id_ = std::move(id); }

  std::span<const float> values() const { return values_; }
  float at(int r, int c) const { return values_[static_cast<std::size_t>(r) * geom_.cols + c]; }

  /// Copy of the pixels inside `roi` as a new grid whose origin tracks the crop.
  ImageGrid crop(const Roi& roi) const {
    if (!roi.inside(geom_)) throw ConfigError("crop region exceeds image bounds");
    GridGeometry g{roi.h, roi.w, geom_.dy, geom_.dx, geom_.y(roi.row), geom_.x(roi.col)};
    std::vector<float> out(g.size());
    for (int r = 0; r < roi.h; ++r)
      for (int c = 0; c < roi.w; ++c)
        out[static_cast<std::size_t>(r) * roi.w + c] = at(roi.row + r, roi.col + c);
    return ImageGrid(g, std::move(out), id_);
  }

 private:
  GridGeometry geom_;
  std::vector<float> values_;
  std::string id_;
};

/// Linear attenuation coefficients in 1/mm.
class AttenuationMap {
 public:
  AttenuationMap() = default;
  AttenuationMap(GridGeometry geom, std::vector<double> values)
      : geom_(geom), values_(std::move(values)) {
    geom_.validate();
    if (values_.size() != geom_.size()) throw ConfigError("attenuation values do not match grid shape");
    for (double v : values_) {
      if (!std::isfinite(v)) throw NumericalError("attenuation map: non-finite value");
      if (v < 0) throw ConfigError("attenuation map: negative coefficient");
    }
  }

  const GridGeometry& geometry() const { return geom_; }
  std::span<const double> values() const { return values_; }
  double at(int r, int c) const { return values_[static_cast<std::size_t>(r) * geom_.cols + c]; }

 private:
  GridGeometry geom_;
  std::vector<double> values_;
};

struct Patch {
  std::vector<float> values;
  std::string source_id;
  int row = 0;
  int col = 0;
  int h = 0;
  int w = 0;

  float at(int r, int c) const { return values[static_cast<std::size_t>(r) * w + c]; }
};

/// mu = mu_water * (1 + HU/1000), clamped below at zero.
inline AttenuationMap hu_to_mu(const ImageGrid& img, double mu_water) {
  require(mu_water > 0 && std::isfinite(mu_water), "mu_water must be positive");
  std::vector<double> mu(img.values().size());
  auto v = img.values();
  for (std::size_t i = 0; i < mu.size(); ++i) {
    mu[i] = std::max(0.0, mu_water * (1.0 + static_cast<double>(v[i]) / 1000.0));
  }
  return AttenuationMap(img.geometry(), std::move(mu));
}

inline double mu_to_hu(double mu, double mu_water) { return (mu / mu_water - 1.0) * 1000.0; }

/// Inverse of hu_to_mu for coefficients that may be negative (reconstructions).
inline ImageGrid mu_values_to_hu(const GridGeometry& geom, std::span<const double> mu, double mu_water,
                                 std::string id = {}) {
  require(mu_water > 0, "mu_water must be positive");
  std::vector<float> hu(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i) hu[i] = static_cast<float>(mu_to_hu(mu[i], mu_water));
  return ImageGrid(geom, std::move(hu), std::move(id));
}

/// Uniform random crops; offsets drawn independently over all valid positions.
inline std::vector<Patch> extract_patches(const ImageGrid& img, int n, int h, int w, std::uint64_t seed) {
  require(n >= 0, "patch count must be non-negative");
  require(h > 0 && w > 0, "patch size must be positive");
  if (img.rows() < h || img.cols() < w) {
    throw ConfigError("image '" + img.id() + "' is smaller than the " + std::to_string(h) + "x" +
                      std::to_string(w) + " patch size");
  }
  Rng rng = make_rng(seed);
  std::uniform_int_distribution<int> rdist(0, img.rows() - h);
  std::uniform_int_distribution<int> cdist(0, img.cols() - w);
  std::vector<Patch> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    int r0 = rdist(rng);
    int c0 = cdist(rng);
    Patch p{std::vector<float>(static_cast<std::size_t>(h) * w), img.id(), r0, c0, h, w};
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) p.values[static_cast<std::size_t>(r) * w + c] = img.at(r0 + r, c0 + c);
    out.push_back(std::move(p));
  }
  return out;
}

inline Patch to_patch(const ImageGrid& img, const Roi& roi) {
  ImageGrid c = img.crop(roi);
  return Patch{std::vector<float>(c.values().begin(), c.values().end()), img.id(), roi.row, roi.col, roi.h,
               roi.w};
}

}  // namespace pcct
