#pragma once

// Synthetic digital phantoms: procedural anatomy-like slices plus analytic
// quality-assurance objects (edge, bar pattern, disk, bead), and the
// isotropic shrink used to increase relative scanner degradation.

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "pcct/core/error.hpp"
#include "pcct/core/image_grid.hpp"
#include "pcct/core/json_util.hpp"
#include "pcct/core/rng.hpp"

namespace pcct {

enum class PhantomKind { AnatomyLike, Edge, BarPattern, UniformDisk, PointBead };

inline std::string to_string(PhantomKind k) {
  switch (k) {
    case PhantomKind::AnatomyLike: return "anatomy-like";
    case PhantomKind::Edge: return "edge";
    case PhantomKind::BarPattern: return "bar-pattern";
    case PhantomKind::UniformDisk: return "uniform-disk";
    case PhantomKind::PointBead: return "point-bead";
  }
  return "?";
}

inline PhantomKind phantom_kind_from_string(const std::string& s) {
  for (auto k : {PhantomKind::AnatomyLike, PhantomKind::Edge, PhantomKind::BarPattern, PhantomKind::UniformDisk,
                 PhantomKind::PointBead}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown phantom kind '" + s + "'");
}

/// Filled ellipse in physical coordinates (mm); angle rotates the y semi-axis
/// towards +x.
struct Ellipse {
  double cy = 0, cx = 0;
  double ay = 1, ax = 1;
  double angle_deg = 0;
  double hu = 0;

  bool contains(double y, double x) const {
    const double t = angle_deg * std::numbers::pi / 180.0;
    const double dy = y - cy, dx = x - cx;
    const double u = dy * std::cos(t) + dx * std::sin(t);
    const double v = -dy * std::sin(t) + dx * std::cos(t);
    return (u * u) / (ay * ay) + (v * v) / (ax * ax) <= 1.0;
  }
  /// Half-extents of the axis-aligned bounding box.
  std::array<double, 2> half_extent() const {
    const double t = angle_deg * std::numbers::pi / 180.0;
    const double hy = std::hypot(ay * std::cos(t), ax * std::sin(t));
    const double hx = std::hypot(ay * std::sin(t), ax * std::cos(t));
    return {hy, hx};
  }
};

struct PhantomSpec {
  PhantomKind kind = PhantomKind::AnatomyLike;
  std::string id;
  int rows = 256;
  int cols = 256;
  double spacing_mm = 0.5;
  double background_hu = kHuAir;
  int supersample = 4;

  // anatomy-like; generated from the render seed when empty
  std::vector<Ellipse> ellipses;

  // edge: line through (center + offset*normal), tilted from the column axis
  double edge_angle_deg = 3.0;
  double edge_offset_mm = 0.0;
  double level_a_hu = 40.0;   // negative side of the normal
  double level_b_hu = 1000.0;  // positive side

  // bar pattern: vertical bars of the given frequency inside a centred square
  double bar_frequency_lpmm = 0.1;
  double bar_hu = 1000.0;
  double base_hu = 0.0;
  double bar_region_half_mm = 40.0;

  // uniform disk / point bead
  double disk_cy_mm = 0.0;
  double disk_cx_mm = 0.0;
  double disk_radius_mm = 40.0;
  double disk_hu = 0.0;

  GridGeometry geometry() const { return GridGeometry::centered(rows, cols, spacing_mm, spacing_mm); }
};

inline json to_json(const Ellipse& e) {
  return {{"cy", e.cy}, {"cx", e.cx}, {"ay", e.ay}, {"ax", e.ax}, {"angle_deg", e.angle_deg}, {"hu", e.hu}};
}

inline json to_json(const PhantomSpec& s) {
  json j = {{"kind", to_string(s.kind)},   {"id", s.id},
            {"rows", s.rows},              {"cols", s.cols},
            {"spacing_mm", s.spacing_mm},  {"background_hu", s.background_hu},
            {"supersample", s.supersample}};
  switch (s.kind) {
    case PhantomKind::AnatomyLike: {
      json el = json::array();
      for (const auto& e : s.ellipses) el.push_back(to_json(e));
      j["ellipses"] = el;
      break;
    }
    case PhantomKind::Edge:
      j["edge_angle_deg"] = s.edge_angle_deg;
      j["edge_offset_mm"] = s.edge_offset_mm;
      j["level_a_hu"] = s.level_a_hu;
      j["level_b_hu"] = s.level_b_hu;
      break;
    case PhantomKind::BarPattern:
      j["bar_frequency_lpmm"] = s.bar_frequency_lpmm;
      j["bar_hu"] = s.bar_hu;
      j["base_hu"] = s.base_hu;
      j["bar_region_half_mm"] = s.bar_region_half_mm;
      break;
    case PhantomKind::UniformDisk:
    case PhantomKind::PointBead:
      j["disk_cy_mm"] = s.disk_cy_mm;
      j["disk_cx_mm"] = s.disk_cx_mm;
      j["disk_radius_mm"] = s.disk_radius_mm;
      j["disk_hu"] = s.disk_hu;
      break;
  }
  return j;
}

inline PhantomSpec phantom_spec_from_json(const json& j, const std::string& where = "phantom") {
  StrictReader r(j, where);
  PhantomSpec s;
  std::string kind;
  r.require("kind", kind);
  s.kind = phantom_kind_from_string(kind);
  if (s.kind == PhantomKind::PointBead) {
    s.disk_radius_mm = 0.5;
    s.disk_hu = 2000.0;
  }
  r.get("id", s.id);
  r.get("rows", s.rows);
  r.get("cols", s.cols);
  r.get("spacing_mm", s.spacing_mm);
  r.get("background_hu", s.background_hu);
  r.get("supersample", s.supersample);
  if (r.has("ellipses")) {
    for (const auto& ej : r.raw("ellipses")) {
      StrictReader er(ej, where + ".ellipses[]");
      Ellipse e;
      er.require("cy", e.cy);
      er.require("cx", e.cx);
      er.require("ay", e.ay);
      er.require("ax", e.ax);
      er.get("angle_deg", e.angle_deg);
      er.require("hu", e.hu);
      er.finish();
      s.ellipses.push_back(e);
    }
  }
  r.get("edge_angle_deg", s.edge_angle_deg);
  r.get("edge_offset_mm", s.edge_offset_mm);
  r.get("level_a_hu", s.level_a_hu);
  r.get("level_b_hu", s.level_b_hu);
  r.get("bar_frequency_lpmm", s.bar_frequency_lpmm);
  r.get("bar_hu", s.bar_hu);
  r.get("base_hu", s.base_hu);
  r.get("bar_region_half_mm", s.bar_region_half_mm);
  r.get("disk_cy_mm", s.disk_cy_mm);
  r.get("disk_cx_mm", s.disk_cx_mm);
  r.get("disk_radius_mm", s.disk_radius_mm);
  r.get("disk_hu", s.disk_hu);
  r.finish();
  return s;
}

/// Homogeneous soft-tissue square kept free of structures in anatomy-like
/// phantoms; at least 64x64 px.
inline Roi homogeneous_roi(const PhantomSpec& s) {
  const int side = std::max(64, std::min(s.rows, s.cols) / 4);
  const int r0 = static_cast<int>(std::lround(s.rows * 0.5 - side / 2.0));
  const int c0 = static_cast<int>(std::lround(s.cols * 0.5 - side / 2.0));
  return {r0, c0, side, side};
}

inline constexpr double kSoftTissueHu = 40.0;

namespace detail {

inline bool hu_in_range(double hu) { return hu >= -1000.0 && hu <= 3000.0; }

/// Procedural head-like slice: skin/soft tissue, a skull ring, a cluster of
/// thin bone laminae with small air cells (temporal-bone analog) and a few
/// low-contrast inserts, leaving homogeneous_roi() untouched.
inline std::vector<Ellipse> generate_anatomy(const PhantomSpec& s, std::uint64_t seed) {
  const double hy = 0.5 * s.rows * s.spacing_mm;
  const double hx = 0.5 * s.cols * s.spacing_mm;
  const double px = s.spacing_mm;
  Rng rng = make_rng(derive_seed(seed, 0xA11A));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };

  std::vector<Ellipse> el;
  const double oy = 0.82 * hy, ox = 0.72 * hx;
  el.push_back({0, 0, oy, ox, 0, kSoftTissueHu});
  const double skull = std::max(3.0 * px, 0.035 * hy);
  el.push_back({0, 0, oy - 1.5 * px, ox - 1.5 * px, 0, uni(1100, 1400)});
  el.push_back({0, 0, oy - 1.5 * px - skull, ox - 1.5 * px - skull, 0, kSoftTissueHu});

  const Roi h = homogeneous_roi(s);
  const GridGeometry g = s.geometry();
  const double margin = 3.0 * px;
  const double ry0 = g.y(h.row - 0.5) - margin, ry1 = g.y(h.row + h.h - 0.5) + margin;
  const double rx0 = g.x(h.col - 0.5) - margin, rx1 = g.x(h.col + h.w - 0.5) + margin;
  const double iy = oy - 1.5 * px - skull - 2 * px, ix = ox - 1.5 * px - skull - 2 * px;

  auto admissible = [&](const Ellipse& e) {
    auto [ey, ex] = e.half_extent();
    bool clear_of_roi = e.cy + ey < ry0 || e.cy - ey > ry1 || e.cx + ex < rx0 || e.cx - ex > rx1;
    // stay inside the skull: test the bounding-box corners against the inner ellipse
    bool inside = true;
    for (double sy : {-1.0, 1.0})
      for (double sx : {-1.0, 1.0}) {
        double yy = e.cy + sy * ey, xx = e.cx + sx * ex;
        if ((yy * yy) / (iy * iy) + (xx * xx) / (ix * ix) > 1.0) inside = false;
      }
    return clear_of_roi && inside;
  };
  auto place = [&](auto make, int count) {
    int placed = 0;
    for (int attempt = 0; placed < count && attempt < 200 * count; ++attempt) {
      Ellipse e = make();
      if (admissible(e)) {
        el.push_back(e);
        ++placed;
      }
    }
  };

  // bands between the homogeneous region and the skull carry the detail
  const double top = 0.5 * (-iy + ry0), bottom = 0.5 * (iy + ry1);
  const double band = 0.5 * (ry0 + iy);
  // low-contrast inserts (fat, grey/white matter analogs)
  place([&] {
    double r = uni(0.25, 0.45) * band;
    return Ellipse{uni(-iy, iy), uni(-ix, ix), r, r * uni(0.6, 1.0), uni(0, 180), uni(-120, 80)};
  }, 4);
  // temporal-bone analog: petrous block with laminae and air cells
  const double bx = (u01(rng) < 0.5 ? -1 : 1) * 0.3 * ix;
  place([&] {
    return Ellipse{top + uni(-0.1, 0.1) * band, bx + uni(-0.1, 0.1) * ix, uni(0.3, 0.45) * band,
                   uni(0.15, 0.25) * ix, uni(-15, 15), uni(300, 500)};
  }, 1);
  place([&] {
    double r = uni(1.0, 2.5) * px;
    return Ellipse{top + uni(-0.6, 0.6) * band, bx + uni(-0.4, 0.4) * ix, r, r, 0, uni(-900, -700)};
  }, 10);
  place([&] {
    // full thickness 1-3 px
    return Ellipse{top + uni(-0.5, 0.5) * band, uni(-0.8, 0.8) * ix, uni(4, 10) * px, uni(0.5, 1.5) * px,
                   uni(0, 180), uni(900, 1600)};
  }, 14);
  // laminae on the opposite side so both halves carry fine detail
  place([&] {
    return Ellipse{bottom + uni(-0.5, 0.5) * band, uni(-0.8, 0.8) * ix, uni(4, 10) * px, uni(0.5, 1.5) * px,
                   uni(0, 180), uni(900, 1400)};
  }, 6);
  return el;
}

inline void validate_spec(const PhantomSpec& s) {
  require(s.rows > 0 && s.cols > 0, "phantom grid shape must be positive");
  require(s.spacing_mm > 0, "phantom spacing must be positive");
  require(s.supersample >= 1 && s.supersample <= 16, "phantom supersample must be in [1, 16]");
  require(hu_in_range(s.background_hu), "phantom background HU outside [-1000, 3000]");
  const double hy = 0.5 * s.rows * s.spacing_mm, hx = 0.5 * s.cols * s.spacing_mm;
  for (const auto& e : s.ellipses) {
    require(e.ay > 0 && e.ax > 0, "ellipse semi-axes must be positive");
    require(hu_in_range(e.hu), "ellipse HU outside [-1000, 3000]");
    auto [ey, ex] = e.half_extent();
    if (std::abs(e.cy) + ey > hy + 1e-9 || std::abs(e.cx) + ex > hx + 1e-9) {
      throw ConfigError("phantom '" + s.id + "': ellipse at (" + std::to_string(e.cy) + ", " +
                        std::to_string(e.cx) + ") mm extends outside the field of view");
    }
  }
  switch (s.kind) {
    case PhantomKind::Edge:
      require(hu_in_range(s.level_a_hu) && hu_in_range(s.level_b_hu), "edge levels outside [-1000, 3000]");
      require(std::abs(s.edge_offset_mm) < std::min(hy, hx), "edge line does not cross the field of view");
      break;
    case PhantomKind::BarPattern:
      require(s.bar_frequency_lpmm > 0, "bar frequency must be positive");
      require(hu_in_range(s.bar_hu + s.base_hu) && hu_in_range(s.base_hu), "bar HU outside [-1000, 3000]");
      require(s.bar_region_half_mm > 0 && s.bar_region_half_mm <= std::min(hy, hx),
              "bar region extends outside the field of view");
      break;
    case PhantomKind::UniformDisk:
    case PhantomKind::PointBead:
      require(s.disk_radius_mm > 0, "disk radius must be positive");
      require(hu_in_range(s.disk_hu), "disk HU outside [-1000, 3000]");
      if (std::abs(s.disk_cy_mm) + s.disk_radius_mm > hy || std::abs(s.disk_cx_mm) + s.disk_radius_mm > hx) {
        throw ConfigError("phantom '" + s.id + "': disk extends outside the field of view");
      }
      break;
    case PhantomKind::AnatomyLike: break;
  }
}

}  // namespace detail

/// Resolves procedural content (anatomy ellipses) so the returned spec
/// renders identically without the seed.
inline PhantomSpec resolve_phantom(PhantomSpec s, std::uint64_t seed) {
  if (s.kind == PhantomKind::AnatomyLike && s.ellipses.empty()) {
    require(s.rows >= 256 && s.cols >= 256,
            "procedural anatomy-like phantoms need at least 256x256 px (homogeneous region is 64x64 px)");
    s.ellipses = detail::generate_anatomy(s, seed);
  }
  return s;
}

/// Deterministic rasterisation with s x s supersampled coverage; the last
/// object painted over a sub-sample wins.
inline ImageGrid render_phantom(const PhantomSpec& spec_in, std::uint64_t seed) {
  const PhantomSpec s = resolve_phantom(spec_in, seed);
  detail::validate_spec(s);
  const GridGeometry g = s.geometry();
  const int ss = s.supersample;
  const double inv = 1.0 / ss;
  std::vector<float> out(g.size());

  struct Prepared {
    double cy, cx, ct, st, iay2, iax2, hy, hx, hu;
  };
  std::vector<Prepared> prepared;
  for (const auto& e : s.ellipses) {
    const double t = e.angle_deg * std::numbers::pi / 180.0;
    auto [hy, hx] = e.half_extent();
    prepared.push_back({e.cy, e.cx, std::cos(t), std::sin(t), 1.0 / (e.ay * e.ay), 1.0 / (e.ax * e.ax), hy, hx, e.hu});
  }

  auto value_at = [&](double y, double x) -> double {
    switch (s.kind) {
      case PhantomKind::AnatomyLike: {
        double v = s.background_hu;
        for (const auto& e : prepared) {
          const double dy = y - e.cy, dx = x - e.cx;
          if (std::abs(dy) > e.hy || std::abs(dx) > e.hx) continue;
          const double u = dy * e.ct + dx * e.st;
          const double w = -dy * e.st + dx * e.ct;
          if (u * u * e.iay2 + w * w * e.iax2 <= 1.0) v = e.hu;
        }
        return v;
      }
      case PhantomKind::Edge: {
        const double t = s.edge_angle_deg * std::numbers::pi / 180.0;
        const double d = -y * std::sin(t) + x * std::cos(t) - s.edge_offset_mm;
        return d < 0 ? s.level_a_hu : s.level_b_hu;
      }
      case PhantomKind::BarPattern: {
        if (std::abs(y) > s.bar_region_half_mm || std::abs(x) > s.bar_region_half_mm) return s.background_hu;
        const double phase = x * s.bar_frequency_lpmm;
        return phase - std::floor(phase) < 0.5 ? s.base_hu + s.bar_hu : s.base_hu;
      }
      case PhantomKind::UniformDisk:
      case PhantomKind::PointBead: {
        const double dy = y - s.disk_cy_mm, dx = x - s.disk_cx_mm;
        return dy * dy + dx * dx <= s.disk_radius_mm * s.disk_radius_mm ? s.disk_hu : s.background_hu;
      }
    }
    return s.background_hu;
  };

  for (int r = 0; r < g.rows; ++r) {
    for (int c = 0; c < g.cols; ++c) {
      double first = 0, acc = 0;
      bool uniform = true;
      for (int i = 0; i < ss; ++i) {
        for (int j = 0; j < ss; ++j) {
          const double y = g.y(r - 0.5 + (i + 0.5) * inv);
          const double x = g.x(c - 0.5 + (j + 0.5) * inv);
          const double v = value_at(y, x);
          if (i == 0 && j == 0) {
            first = v;
          } else if (v != first) {
            uniform = false;
          }
          acc += v;
        }
      }
      // exact levels wherever the pixel is not cut by a boundary
      out[static_cast<std::size_t>(r) * g.cols + c] =
          static_cast<float>(uniform ? first : acc / (ss * ss));
    }
  }
  std::string id = s.id.empty() ? to_string(s.kind) : s.id;
  return ImageGrid(g, std::move(out), id);
}

/// Scales the physical extent of the object by `factor` about the grid
/// centre, resampling onto the same raster with bilinear interpolation;
/// samples falling outside the source are background (-1000 HU).
inline ImageGrid shrink_phantom(const ImageGrid& img, double factor, double fill_hu = kHuAir) {
  if (!(factor > 0)) throw ConfigError("shrink factor must be > 0");
  if (factor > 1) throw ConfigError("shrink factor must be <= 1");
  const GridGeometry& g = img.geometry();
  const double cr = g.center_row(), cc = g.center_col();
  auto src = [&](int r, int c) -> double {
    if (r < 0 || c < 0 || r >= g.rows || c >= g.cols) return fill_hu;
    return img.at(r, c);
  };
  std::vector<float> out(g.size());
  for (int r = 0; r < g.rows; ++r) {
    const double sr = cr + (r - cr) / factor;
    const int r0 = static_cast<int>(std::floor(sr));
    const double fr = sr - r0;
    for (int c = 0; c < g.cols; ++c) {
      const double sc = cc + (c - cc) / factor;
      const int c0 = static_cast<int>(std::floor(sc));
      const double fc = sc - c0;
      double v;
      if (fr == 0.0 && fc == 0.0) {
        v = src(r0, c0);
      } else {
        v = (1 - fr) * ((1 - fc) * src(r0, c0) + fc * src(r0, c0 + 1)) +
            fr * ((1 - fc) * src(r0 + 1, c0) + fc * src(r0 + 1, c0 + 1));
      }
      out[static_cast<std::size_t>(r) * g.cols + c] = static_cast<float>(v);
    }
  }
  return ImageGrid(g, std::move(out), img.id());
}

/// Location of a source-image region after shrink_phantom(factor).
inline Roi shrink_roi(const Roi& roi, const GridGeometry& g, double factor) {
  const double cr = g.center_row(), cc = g.center_col();
  const double mr = roi.row + 0.5 * (roi.h - 1), mc = roi.col + 0.5 * (roi.w - 1);
  const int h = std::max(1, static_cast<int>(std::floor(roi.h * factor)));
  const int w = std::max(1, static_cast<int>(std::floor(roi.w * factor)));
  const double nr = cr + (mr - cr) * factor, nc = cc + (mc - cc) * factor;
  return {static_cast<int>(std::lround(nr - 0.5 * (h - 1))), static_cast<int>(std::lround(nc - 0.5 * (w - 1))), h, w};
}

}  // namespace pcct
