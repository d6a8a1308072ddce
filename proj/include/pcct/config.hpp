#pragma once

#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pcct/core/error.hpp"
#include "pcct/core/json_util.hpp"
#include "pcct/core/raw_io.hpp"
#include "pcct/dataset.hpp"
#include "pcct/denoiser.hpp"
#include "pcct/diffusion.hpp"
#include "pcct/eval.hpp"

namespace pcct {

inline constexpr const char* kToolName = "pcctsr";
#ifdef PCCT_VERSION
inline constexpr const char* kToolVersion = PCCT_VERSION;
#else
inline constexpr const char* kToolVersion = "0.0.0";
#endif
inline constexpr const char* kOutputRootEnv = "PCCT_OUTPUT_ROOT";

// ---------------------------------------------------------------------------
// small readers
// ---------------------------------------------------------------------------

inline json to_json(const Roi& r) { return {{"row", r.row}, {"col", r.col}, {"h", r.h}, {"w", r.w}}; }

inline Roi roi_from_json(const json& j, const std::string& where) {
  Roi r;
  StrictReader s(j, where);
  s.require("row", r.row);
  s.require("col", r.col);
  s.require("h", r.h);
  s.require("w", r.w);
  s.finish();
  require(r.h > 0 && r.w > 0, where + ": h and w must be positive");
  return r;
}

/// Defaults fit the shrunk square of a default 256 px edge phantom.
inline CompareConfig default_compare_config() {
  CompareConfig c;
  c.edge.roi = Roi{32, 32, 64, 64};
  c.edge.angle_deg = 3.0;
  c.uniform_roi = Roi{40, 12, 48, 40};
  return c;
}

inline CompareConfig compare_config_from_json(const json& j, const std::string& where = "eval") {
  CompareConfig c = default_compare_config();
  StrictReader r(j, where);
  if (r.has("edge")) {
    StrictReader e(r.raw("edge"), where + ".edge");
    if (e.has("roi")) c.edge.roi = roi_from_json(e.raw("roi"), where + ".edge.roi");
    e.get("angle_deg", c.edge.angle_deg);
    e.get("angle_tolerance_deg", c.edge.angle_tolerance_deg);
    e.get("max_residual_px", c.edge.max_residual_px);
    e.get("max_frequency_per_px", c.edge.max_frequency_per_px);
    e.get("half_window_px", c.edge.half_window_px);
    e.finish();
  }
  if (r.has("uniform_roi")) c.uniform_roi = roi_from_json(r.raw("uniform_roi"), where + ".uniform_roi");
  r.get("oversample", c.oversample);
  r.get("detrend_order", c.detrend_order);
  std::string taper = to_string(c.taper);
  r.get("taper", taper);
  c.taper = taper_from_string(taper);
  r.get("dynamic_range_hu", c.dynamic_range);
  r.finish();
  require(c.dynamic_range > 0, where + ".dynamic_range_hu must be positive");
  return c;
}

inline json to_json(const TileOptions& t) { return {{"tile", t.tile}, {"overlap", t.overlap}, {"margin", t.margin}}; }

inline TileOptions tile_options_from_json(const json& j, const std::string& where) {
  TileOptions t;
  StrictReader r(j, where);
  r.get("tile", t.tile);
  r.get("overlap", t.overlap);
  r.get("margin", t.margin);
  r.finish();
  return t;
}

inline std::string to_string(SplitRole r) {
  switch (r) {
    case SplitRole::Auto: return "auto";
    case SplitRole::Train: return "train";
    case SplitRole::Validation: return "validation";
    case SplitRole::Test: return "test";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

struct EvalSettings {
  std::string group;                                    // empty: first test group, else first validation group
  std::optional<Roi> sample_roi = Roi{64, 64, 128, 128};  // crop that is super-resolved; null: whole slice
  CompareConfig compare = default_compare_config();      // regions relative to the crop
};

struct RunConfig {
  std::uint64_t seed = 0;
  fs::path output_root = "runs/default";
  DatasetConfig dataset;
  DenoiserTrainConfig lr_denoiser;
  DenoiserTrainConfig hr_denoiser;
  TileOptions tiles;
  DiffusionTrainConfig diffusion;
  std::vector<ConditioningScheme> schemes = {ConditioningScheme::Plain, ConditioningScheme::NoiseSplit,
                                             ConditioningScheme::DenoiseOnly};
  std::optional<int> sample_steps;
  EvalSettings eval;
};

/// Seed tags for each stage, derived from the global seed.
enum SeedTag : std::uint64_t {
  kSeedDataset = 1,
  kSeedLrDenoiser = 2,
  kSeedHrDenoiser = 3,
  kSeedDiffusion = 4,
  kSeedSampling = 5,
};

namespace detail {

inline json without(json j, std::initializer_list<const char*> keys) {
  for (const char* k : keys) j.erase(k);
  return j;
}

inline void reject_seed(const json& j, const std::string& where) {
  if (j.is_object() && j.contains("seed")) {
    throw ConfigError(where + ": unknown key(s): " + where + ".seed (stage seeds derive from the global seed)");
  }
}

}  // namespace detail

inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  StrictReader r(j, "config");
  r.get("seed", c.seed);
  std::string root = c.output_root.string();
  r.get("output_root", root);
  c.output_root = root;

  if (r.has("phantoms")) {
    const json& ps = r.raw("phantoms");
    if (!ps.is_array()) throw ConfigError("config.phantoms: expected an array");
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const std::string where = "config.phantoms[" + std::to_string(i) + "]";
      if (!ps[i].is_object()) throw ConfigError(where + ": expected a JSON object");
      DatasetPhantom p;
      p.role = split_role_from_string(ps[i].value("split", std::string("auto")));
      p.spec = phantom_spec_from_json(detail::without(ps[i], {"split"}), where);
      detail::validate_spec(p.spec);
      c.dataset.phantoms.push_back(p);
    }
  }
  if (r.has("geometry")) c.dataset.geometry = scan_geometry_from_json(r.raw("geometry"), "config.geometry");
  if (r.has("degradation")) {
    detail::reject_seed(r.raw("degradation"), "config.degradation");
    c.dataset.degradation = degradation_from_json(r.raw("degradation"), "config.degradation");
  }
  if (r.has("recon")) c.dataset.recon = recon_config_from_json(r.raw("recon"), "config.recon");
  if (r.has("dataset")) {
    StrictReader d(r.raw("dataset"), "config.dataset");
    d.get("shrink_factor", c.dataset.shrink_factor);
    d.finish();
    require(c.dataset.shrink_factor > 0 && c.dataset.shrink_factor <= 1, "config.dataset.shrink_factor must be in (0, 1]");
  }
  if (r.has("denoiser")) {
    StrictReader d(r.raw("denoiser"), "config.denoiser");
    if (d.has("lr")) {
      detail::reject_seed(d.raw("lr"), "config.denoiser.lr");
      c.lr_denoiser = denoiser_train_config_from_json(d.raw("lr"), "config.denoiser.lr");
    }
    if (d.has("hr")) {
      detail::reject_seed(d.raw("hr"), "config.denoiser.hr");
      c.hr_denoiser = denoiser_train_config_from_json(d.raw("hr"), "config.denoiser.hr");
    }
    if (d.has("tiles")) c.tiles = tile_options_from_json(d.raw("tiles"), "config.denoiser.tiles");
    d.finish();
  }
  if (r.has("diffusion")) {
    const json& dj = r.raw("diffusion");
    if (!dj.is_object()) throw ConfigError("config.diffusion: expected a JSON object");
    detail::reject_seed(dj, "config.diffusion");
    c.diffusion = diffusion_train_config_from_json(detail::without(dj, {"schemes", "sample_steps"}), "config.diffusion");
    if (dj.contains("schemes")) {
      c.schemes.clear();
      for (const auto& s : dj.at("schemes")) c.schemes.push_back(conditioning_scheme_from_string(s.get<std::string>()));
      require(!c.schemes.empty(), "config.diffusion.schemes must not be empty");
    }
    if (dj.contains("sample_steps") && !dj.at("sample_steps").is_null()) {
      c.sample_steps = dj.at("sample_steps").get<int>();
      require(*c.sample_steps >= 1 && *c.sample_steps <= c.diffusion.T,
              "config.diffusion.sample_steps must be in [1, T]");
    }
  }
  if (r.has("eval")) {
    const json& ej = r.raw("eval");
    if (!ej.is_object()) throw ConfigError("config.eval: expected a JSON object");
    c.eval.group = ej.value("group", std::string());
    if (ej.contains("sample_roi")) {
      if (ej.at("sample_roi").is_null()) {
        c.eval.sample_roi.reset();
      } else {
        c.eval.sample_roi = roi_from_json(ej.at("sample_roi"), "config.eval.sample_roi");
      }
    }
    c.eval.compare = compare_config_from_json(detail::without(ej, {"group", "sample_roi"}), "config.eval");
  }
  r.finish();
  c.lr_denoiser.seed = derive_seed(c.seed, kSeedLrDenoiser);
  c.hr_denoiser.seed = derive_seed(c.seed, kSeedHrDenoiser);
  c.diffusion.seed = derive_seed(c.seed, kSeedDiffusion);
  return c;
}

/// Fully resolved configuration (defaults filled in); parses back to the same run.
inline json to_json(const RunConfig& c) {
  json phantoms = json::array();
  for (const auto& p : c.dataset.phantoms) {
    json j = to_json(p.spec);
    j["split"] = to_string(p.role);
    phantoms.push_back(j);
  }
  json degradation = to_json(c.dataset.degradation);
  degradation.erase("seed");
  json lr = to_json(c.lr_denoiser), hr = to_json(c.hr_denoiser), diff = to_json(c.diffusion);
  lr.erase("seed");
  hr.erase("seed");
  diff.erase("seed");
  diff["net"].erase("in_channels");
  json schemes = json::array();
  for (auto s : c.schemes) schemes.push_back(to_string(s));
  diff["schemes"] = schemes;
  diff["sample_steps"] = c.sample_steps ? json(*c.sample_steps) : json(nullptr);
  json eval = to_json(c.eval.compare);
  eval["group"] = c.eval.group;
  eval["sample_roi"] = c.eval.sample_roi ? to_json(*c.eval.sample_roi) : json(nullptr);
  return {{"seed", c.seed},
          {"output_root", c.output_root.string()},
          {"phantoms", phantoms},
          {"geometry", to_json(c.dataset.geometry)},
          {"degradation", degradation},
          {"recon", to_json(c.dataset.recon)},
          {"dataset", {{"shrink_factor", c.dataset.shrink_factor}}},
          {"denoiser", {{"lr", lr}, {"hr", hr}, {"tiles", to_json(c.tiles)}}},
          {"diffusion", diff},
          {"eval", eval}};
}

// ---------------------------------------------------------------------------
// overrides: --section.key value
// ---------------------------------------------------------------------------

/// Sets the dotted `path` in `j`; numeric segments index arrays. The value
/// is read as JSON when it parses, otherwise as a string.
inline void apply_override(json& j, const std::string& path, const std::string& value) {
  if (path.empty()) throw ConfigError("empty override key");
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;
  json* cur = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string seg = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (seg.empty()) throw ConfigError("malformed override key '" + path + "'");
    json* next;
    if (cur->is_array()) {
      std::size_t idx;
      try {
        idx = std::stoul(seg);
      } catch (const std::exception&) {
        throw ConfigError("override '" + path + "': '" + seg + "' is not an array index");
      }
      if (idx >= cur->size()) throw ConfigError("override '" + path + "': index " + seg + " out of range");
      next = &(*cur)[idx];
    } else {
      if (cur->is_null()) *cur = json::object();
      if (!cur->is_object()) throw ConfigError("override '" + path + "': '" + seg + "' is not inside an object");
      next = &(*cur)[seg];
    }
    if (dot == std::string::npos) {
      *next = parsed;
      return;
    }
    cur = next;
    start = dot + 1;
  }
}

/// Applies `--a.b value` / `--a.b=value` pairs.
inline void apply_overrides(json& j, const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + a + "'");
    std::string key = a.substr(2), value;
    const std::size_t eq = key.find('=');
    if (eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= args.size()) throw ConfigError("override --" + key + " needs a value");
      value = args[++i];
    }
    apply_override(j, key, value);
  }
}

/// Reads the config file, applies overrides, the output-root environment
/// variable and explicit seed/root flags (in increasing precedence).
inline RunConfig load_run_config(const std::optional<fs::path>& file, const std::vector<std::string>& overrides,
                                 std::optional<std::uint64_t> seed, std::optional<std::string> output_root) {
  json j = json::object();
  if (file) {
    if (!fs::exists(*file)) throw ConfigError("config file '" + file->string() + "' not found");
    try {
      j = read_json(*file);
    } catch (const FormatError& e) {
      throw ConfigError(e.what());
    }
  }
  apply_overrides(j, overrides);
  if (const char* env = std::getenv(kOutputRootEnv); env && *env) j["output_root"] = env;
  if (output_root) j["output_root"] = *output_root;
  if (seed) j["seed"] = *seed;
  return run_config_from_json(j);
}

}  // namespace pcct
