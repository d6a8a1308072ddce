#pragma once

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pcct/core/error.hpp"
#include "pcct/core/image_grid.hpp"
#include "pcct/core/json_util.hpp"
#include "pcct/core/raw_io.hpp"
#include "pcct/core/rng.hpp"
#include "pcct/phantom.hpp"
#include "pcct/recon.hpp"
#include "pcct/simulator.hpp"

namespace pcct {

namespace fs = std::filesystem;

/// Stored images live on a 2^-10 HU grid so that differences and sums of
/// any two of them are exact in float32.
inline constexpr double kHuQuantum = 1.0 / 1024.0;
inline constexpr double kHuGridLimit = 8000.0;

inline float quantize_hu(double v) {
  v = std::clamp(v, -kHuGridLimit, kHuGridLimit);
  return static_cast<float>(std::nearbyint(v / kHuQuantum) * kHuQuantum);
}

inline ImageGrid quantize(const ImageGrid& img) {
  std::vector<float> v(img.values().size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = quantize_hu(img.values()[i]);
  return ImageGrid(img.geometry(), std::move(v), img.id());
}

inline bool on_hu_grid(float v) {
  return std::abs(v) <= kHuGridLimit && static_cast<double>(v) / kHuQuantum == std::nearbyint(v / kHuQuantum);
}

/// Splits `a` into (denoised', noise) with noise = a - denoised' and
/// denoised' + noise == a, both in float32, denoised' as close to `d` as the
/// representation allows (clamped to the HU grid range for on-grid
/// inputs). Returns false when only the degenerate split
/// (a, 0) satisfies the identity.
inline bool exact_split(float a, float d, float& denoised, float& noise) {
  if (on_hu_grid(a) && !std::isnan(d)) {
    denoised = quantize_hu(d);
    noise = a - denoised;  // exact: both on the grid, |noise| < 2^14
    if (denoised + noise == a) return true;
  }
  const float base = a - (a - d);
  float up = base, down = base;
  for (int k = 0; k <= 4; ++k) {
    for (float cand : {up, down}) {
      const float n = a - cand;
      if (cand + n == a) {
        denoised = cand;
        noise = n;
        return true;
      }
    }
    up = std::nextafter(up, INFINITY);
    down = std::nextafter(down, -INFINITY);
  }
  denoised = a;
  noise = 0.0f;
  return false;
}

// ---------------------------------------------------------------------------
// sample groups
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& group_channel_names() {
  static const std::vector<std::string> names = {"clean_hr", "noisy_hr", "lr_a", "lr_b", "denoised_lr", "noise_map"};
  return names;
}

struct SampleGroup {
  std::string id;
  std::optional<ImageGrid> clean_hr, noisy_hr, lr_a, lr_b, denoised_lr, noise_map;
  json provenance = json::object();

  std::optional<ImageGrid>& channel(const std::string& name) {
    if (name == "clean_hr") return clean_hr;
    if (name == "noisy_hr") return noisy_hr;
    if (name == "lr_a") return lr_a;
    if (name == "lr_b") return lr_b;
    if (name == "denoised_lr") return denoised_lr;
    if (name == "noise_map") return noise_map;
    throw ConfigError("unknown sample-group channel '" + name + "'");
  }
  const std::optional<ImageGrid>& channel(const std::string& name) const {
    return const_cast<SampleGroup*>(this)->channel(name);
  }

  /// Throws DependencyError naming `stage` when `name` is absent.
  const ImageGrid& require_channel(const std::string& name, const std::string& stage) const {
    const auto& c = channel(name);
    if (!c) throw DependencyError(stage, "sample group '" + id + "' has no " + name + " channel");
    return *c;
  }

  /// Every present grid shares the same geometry.
  void check_alignment() const {
    const GridGeometry* ref = nullptr;
    for (const auto& n : group_channel_names()) {
      const auto& c = channel(n);
      if (!c) continue;
      if (!ref) {
        ref = &c->geometry();
      } else if (!(c->geometry() == *ref)) {
        throw ConfigError("sample group '" + id + "': " + n + " is not aligned with the other channels");
      }
    }
  }
};

struct SplitManifest {
  std::vector<std::string> train, validation, test;

  void validate() const {
    require(!train.empty(), "split manifest needs at least one training group");
    require(!validation.empty(), "split manifest needs at least one validation group");
    std::vector<std::string> all;
    for (const auto* l : {&train, &validation, &test}) all.insert(all.end(), l->begin(), l->end());
    std::sort(all.begin(), all.end());
    require(std::adjacent_find(all.begin(), all.end()) == all.end(), "split manifest lists overlap");
  }
  std::vector<std::string> all() const {
    std::vector<std::string> v = train;
    v.insert(v.end(), validation.begin(), validation.end());
    v.insert(v.end(), test.begin(), test.end());
    return v;
  }
};

inline json to_json(const SplitManifest& m) {
  return {{"train", m.train}, {"validation", m.validation}, {"test", m.test}};
}

inline SplitManifest split_manifest_from_json(const json& j) {
  SplitManifest m;
  StrictReader r(j, "manifest");
  r.require("train", m.train);
  r.require("validation", m.validation);
  r.get("test", m.test);
  r.mark("groups");
  r.mark("provenance");
  r.finish();
  m.validate();
  return m;
}

inline void save_group(const SampleGroup& g, const fs::path& dir) {
  g.check_alignment();
  fs::create_directories(dir / g.id);
  for (const auto& n : group_channel_names()) {
    const auto& c = g.channel(n);
    if (c) save_grid(*c, dir / g.id / (n + ".raw"), {{"group", g.id}, {"channel", n}, {"provenance", g.provenance}});
  }
}

inline SampleGroup load_group(const fs::path& dir, const std::string& id) {
  if (!fs::exists(dir / id)) throw DependencyError("dataset", "no sample group directory '" + (dir / id).string() + "'");
  SampleGroup g;
  g.id = id;
  for (const auto& n : group_channel_names()) {
    const fs::path p = dir / id / (n + ".raw");
    if (!fs::exists(p)) continue;
    RawArray a = load_raw(p);
    if (a.extra.contains("provenance")) g.provenance = a.extra["provenance"];
    g.channel(n) = ImageGrid(a.geometry, std::move(a.values), a.id);
  }
  g.check_alignment();
  return g;
}

inline SplitManifest load_manifest(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) {
    throw DependencyError("dataset", "no manifest.json under '" + dir.string() + "'");
  }
  return split_manifest_from_json(read_json(dir / "manifest.json"));
}

inline std::vector<SampleGroup> load_groups(const fs::path& dir, const std::vector<std::string>& ids) {
  std::vector<SampleGroup> out;
  for (const auto& id : ids) out.push_back(load_group(dir, id));
  return out;
}

// ---------------------------------------------------------------------------
// building
// ---------------------------------------------------------------------------

enum class SplitRole { Auto, Train, Validation, Test };

inline SplitRole split_role_from_string(const std::string& s) {
  if (s == "auto") return SplitRole::Auto;
  if (s == "train") return SplitRole::Train;
  if (s == "validation") return SplitRole::Validation;
  if (s == "test") return SplitRole::Test;
  throw ConfigError("unknown split role '" + s + "' (expected auto|train|validation|test)");
}

struct DatasetPhantom {
  PhantomSpec spec;
  SplitRole role = SplitRole::Auto;
};

struct DatasetConfig {
  std::vector<DatasetPhantom> phantoms;
  double shrink_factor = 0.5;
  ScanGeometry geometry;
  DegradationModel degradation;
  ReconConfig recon;  // grid is taken from each phantom
};

/// Held-out policy without explicit roles: the last phantom is the test
/// slice (when there are at least three), the one before it validation.
inline SplitManifest assign_splits(const std::vector<DatasetPhantom>& ps, const std::vector<std::string>& ids) {
  SplitManifest m;
  const int n = static_cast<int>(ps.size());
  for (int i = 0; i < n; ++i) {
    SplitRole r = ps[i].role;
    if (r == SplitRole::Auto) {
      if (n >= 3 && i == n - 1) r = SplitRole::Test;
      else if (i == (n >= 3 ? n - 2 : n - 1)) r = SplitRole::Validation;
      else r = SplitRole::Train;
    }
    (r == SplitRole::Train ? m.train : r == SplitRole::Validation ? m.validation : m.test).push_back(ids[i]);
  }
  m.validate();
  return m;
}

inline std::string group_id(const DatasetPhantom& p, int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "g%03d", index);
  return std::string(buf) + "_" + (p.spec.id.empty() ? to_string(p.spec.kind) : p.spec.id);
}

/// One slice: shrink, LR protocol twice with independent seeds, HR once,
/// FBP onto the phantom raster.
inline SampleGroup simulate_group(const DatasetPhantom& p, const DatasetConfig& cfg, const std::string& id,
                                  std::uint64_t group_seed) {
  ImageGrid phantom = render_phantom(p.spec, derive_seed(group_seed, 0));
  ImageGrid clean = shrink_phantom(phantom, cfg.shrink_factor);
  ReconConfig rc = cfg.recon;
  rc.grid = clean.geometry();
  AttenuationMap mu = hu_to_mu(clean, rc.mu_water);

  auto [lr_model, lr_geom] = make_protocol(Protocol::LR, cfg.degradation, cfg.geometry);
  auto [hr_model, hr_geom] = make_protocol(Protocol::HR, cfg.degradation, cfg.geometry);
  Sinogram lr_clean = project(mu, lr_geom);
  Sinogram hr_clean = project(mu, hr_geom);

  const std::uint64_t seed_a = derive_seed(group_seed, 1), seed_b = derive_seed(group_seed, 2),
                      seed_hr = derive_seed(group_seed, 3);
  auto run = [&](const Sinogram& s, DegradationModel m, std::uint64_t seed, const std::string& name) {
    m.seed = seed;
    return quantize(fbp(degrade_and_count(s, m), rc, id + "/" + name));
  };
  SampleGroup g;
  g.id = id;
  g.clean_hr = quantize(clean);
  g.clean_hr->set_id(id + "/clean_hr");
  g.lr_a = run(lr_clean, lr_model, seed_a, "lr_a");
  g.lr_b = run(lr_clean, lr_model, seed_b, "lr_b");
  g.noisy_hr = run(hr_clean, hr_model, seed_hr, "noisy_hr");
  g.provenance = {{"phantom", to_json(resolve_phantom(p.spec, derive_seed(group_seed, 0)))},
                  {"shrink_factor", cfg.shrink_factor},
                  {"lr", {{"geometry", to_json(lr_geom)}, {"degradation", to_json(lr_model)}}},
                  {"hr", {{"geometry", to_json(hr_geom)}, {"degradation", to_json(hr_model)}}},
                  {"recon", to_json(rc)},
                  {"seeds", {{"group", group_seed}, {"lr_a", seed_a}, {"lr_b", seed_b}, {"noisy_hr", seed_hr}}}};
  return g;
}

/// Renders, simulates and persists every phantom, then writes manifest.json.
inline SplitManifest build_dataset(const DatasetConfig& cfg, const fs::path& out_dir, std::uint64_t seed) {
  if (cfg.phantoms.size() < 2) {
    throw ConfigError("dataset needs at least 2 phantoms (one for training, one held out); got " +
                      std::to_string(cfg.phantoms.size()));
  }
  require(cfg.shrink_factor > 0 && cfg.shrink_factor <= 1, "dataset shrink_factor must be in (0, 1]");
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < cfg.phantoms.size(); ++i) ids.push_back(group_id(cfg.phantoms[i], static_cast<int>(i)));
  SplitManifest m = assign_splits(cfg.phantoms, ids);
  fs::create_directories(out_dir);
  json groups = json::array();
  for (std::size_t i = 0; i < cfg.phantoms.size(); ++i) {
    SampleGroup g = simulate_group(cfg.phantoms[i], cfg, ids[i], derive_seed(seed, 1000 + i));
    save_group(g, out_dir);
    groups.push_back({{"id", ids[i]}, {"kind", to_string(cfg.phantoms[i].spec.kind)}});
  }
  json manifest = to_json(m);
  manifest["groups"] = groups;
  manifest["provenance"] = {{"seed", seed}};
  write_json(out_dir / "manifest.json", manifest);
  return m;
}

// ---------------------------------------------------------------------------
// noise disentanglement
// ---------------------------------------------------------------------------

struct SplitResult {
  ImageGrid denoised;
  ImageGrid noise;
  std::size_t degenerate = 0;  // pixels that needed the (input, 0) split
};

/// Exact decomposition of `img` around a denoiser estimate.
inline SplitResult decompose(const ImageGrid& img, const ImageGrid& estimate) {
  if (!(img.geometry() == estimate.geometry())) {
    throw ConfigError("denoised image is not aligned with '" + img.id() + "'");
  }
  std::vector<float> d(img.values().size()), n(img.values().size());
  std::size_t bad = 0;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (!exact_split(img.values()[i], estimate.values()[i], d[i], n[i])) ++bad;
  return {ImageGrid(img.geometry(), std::move(d), img.id() + "/denoised"),
          ImageGrid(img.geometry(), std::move(n), img.id() + "/noise"), bad};
}

using DenoiseFn = std::function<ImageGrid(const ImageGrid&)>;

/// denoised_lr = denoiser(lr_a), noise_map = lr_a - denoised_lr.
inline SampleGroup attach_denoised(SampleGroup g, const DenoiseFn& denoiser) {
  const ImageGrid& a = g.require_channel("lr_a", "dataset");
  ImageGrid est = denoiser(a);
  if (!(est.geometry() == a.geometry())) {
    throw ConfigError("denoiser output for group '" + g.id + "' does not match the lr_a shape");
  }
  SplitResult s = decompose(a, est);
  s.denoised.set_id(g.id + "/denoised_lr");
  s.noise.set_id(g.id + "/noise_map");
  g.denoised_lr = std::move(s.denoised);
  g.noise_map = std::move(s.noise);
  g.provenance["denoise_degenerate_pixels"] = s.degenerate;
  return g;
}

}  // namespace pcct
