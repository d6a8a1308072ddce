#pragma once

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "pcct/config.hpp"
#include "pcct/core/sha256.hpp"

namespace pcct {

/// Output layout under the run's output root.
struct RunPaths {
  fs::path root;
  fs::path phantoms() const { return root / "phantoms"; }
  fs::path simulate() const { return root / "simulate"; }
  fs::path dataset() const { return root / "dataset"; }
  fs::path denoiser() const { return root / "denoiser"; }
  fs::path denoised() const { return root / "denoise-apply"; }
  fs::path ddpm() const { return root / "ddpm"; }
  fs::path samples() const { return root / "samples"; }
  fs::path report() const { return root / "report"; }
  fs::path lr_denoiser() const { return denoiser() / "lr"; }
  fs::path hr_denoiser() const { return denoiser() / "hr"; }
  fs::path ddpm_checkpoint(ConditioningScheme s) const { return ddpm() / to_string(s); }
  fs::path sample_file(const std::string& name) const { return samples() / (name + ".raw"); }
};

inline void log_stage(const std::string& stage, const std::string& msg) {
  std::clog << "[" << stage << "] " << msg << std::endl;
}

/// run.json: resolved config, tool version and stage, enough to replay.
inline void write_run_info(const fs::path& dir, const RunConfig& cfg, const std::string& stage,
                           const json& extra = json::object()) {
  fs::create_directories(dir);
  json j = {{"tool", kToolName}, {"version", kToolVersion}, {"stage", stage}, {"config", to_json(cfg)}};
  if (!extra.empty()) j["stage_args"] = extra;
  write_json(dir / "run.json", j);
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

inline void require_phantoms(const RunConfig& cfg) {
  if (cfg.dataset.phantoms.empty()) throw ConfigError("config.phantoms is empty");
}

inline std::string phantom_label(const DatasetPhantom& p, std::size_t i) { return group_id(p, static_cast<int>(i)); }

inline void stage_phantom(const RunConfig& cfg) {
  require_phantoms(cfg);
  const RunPaths P{cfg.output_root};
  const std::uint64_t seed = derive_seed(cfg.seed, kSeedDataset);
  for (std::size_t i = 0; i < cfg.dataset.phantoms.size(); ++i) {
    const auto& p = cfg.dataset.phantoms[i];
    // same render seed as the dataset builder
    const std::uint64_t s = derive_seed(derive_seed(seed, 1000 + i), 0);
    const std::string id = phantom_label(p, i);
    const ImageGrid img = render_phantom(p.spec, s);
    save_grid(img, P.phantoms() / (id + ".raw"), {{"spec", to_json(resolve_phantom(p.spec, s))}, {"seed", s}});
    const ImageGrid shrunk = shrink_phantom(img, cfg.dataset.shrink_factor);
    save_grid(shrunk, P.phantoms() / (id + "_shrunk.raw"), {{"shrink_factor", cfg.dataset.shrink_factor}});
    log_stage("phantom", "wrote " + id);
  }
  write_run_info(P.phantoms(), cfg, "phantom");
}

/// One phantom through one protocol: sinogram plus FBP image.
inline void stage_simulate(const RunConfig& cfg, std::size_t index, Protocol protocol) {
  require_phantoms(cfg);
  if (index >= cfg.dataset.phantoms.size()) {
    throw ConfigError("phantom index " + std::to_string(index) + " out of range (config has " +
                      std::to_string(cfg.dataset.phantoms.size()) + ")");
  }
  const RunPaths P{cfg.output_root};
  const auto& p = cfg.dataset.phantoms[index];
  const std::uint64_t group_seed = derive_seed(derive_seed(cfg.seed, kSeedDataset), 1000 + index);
  const ImageGrid clean = quantize(shrink_phantom(render_phantom(p.spec, derive_seed(group_seed, 0)), cfg.dataset.shrink_factor));
  auto [model, geom] = make_protocol(protocol, cfg.dataset.degradation, cfg.dataset.geometry);
  model.seed = derive_seed(group_seed, protocol == Protocol::LR ? 1 : 3);
  ReconConfig rc = cfg.dataset.recon;
  rc.grid = clean.geometry();
  const Sinogram sino = degrade_and_count(project(hu_to_mu(clean, rc.mu_water), geom), model);
  const std::string id = phantom_label(p, index) + (protocol == Protocol::LR ? "_lr" : "_hr");
  save_sinogram(sino, P.simulate() / (id + "_sinogram.raw"));
  save_grid(quantize(fbp(sino, rc, id)), P.simulate() / (id + "_fbp.raw"),
            {{"geometry", to_json(geom)}, {"degradation", to_json(model)}, {"recon", to_json(rc)}});
  write_run_info(P.simulate(), cfg, "simulate",
                 {{"phantom", index}, {"protocol", protocol == Protocol::LR ? "lr" : "hr"}});
  log_stage("simulate", "wrote " + id);
}

inline SplitManifest stage_dataset(const RunConfig& cfg) {
  require_phantoms(cfg);
  const RunPaths P{cfg.output_root};
  if (fs::exists(P.dataset())) fs::remove_all(P.dataset());
  log_stage("dataset", "simulating " + std::to_string(cfg.dataset.phantoms.size()) + " slices");
  SplitManifest m = build_dataset(cfg.dataset, P.dataset(), derive_seed(cfg.seed, kSeedDataset));
  write_run_info(P.dataset(), cfg, "dataset");
  return m;
}

inline std::vector<SampleGroup> load_split(const RunConfig& cfg, const std::vector<std::string>& ids) {
  return load_groups(RunPaths{cfg.output_root}.dataset(), ids);
}

enum class DenoiserKind { Lr, Hr, Both };

inline DenoiserKind denoiser_kind_from_string(const std::string& s) {
  if (s == "lr") return DenoiserKind::Lr;
  if (s == "hr") return DenoiserKind::Hr;
  if (s == "both") return DenoiserKind::Both;
  throw ConfigError("unknown denoiser kind '" + s + "' (expected lr|hr|both)");
}

inline void stage_denoise_train(const RunConfig& cfg, DenoiserKind kind) {
  const RunPaths P{cfg.output_root};
  const SplitManifest m = load_manifest(P.dataset());
  const auto train = load_split(cfg, m.train);
  if (kind != DenoiserKind::Hr) {
    log_stage("denoise-train", "lr denoiser, " + std::to_string(cfg.lr_denoiser.iterations) + " iterations");
    save_denoiser(P.lr_denoiser(), train_lr_denoiser(train, cfg.lr_denoiser),
                  nullptr, {{"train_groups", m.train}, {"config", to_json(cfg.lr_denoiser)}});
  }
  if (kind != DenoiserKind::Lr) {
    log_stage("denoise-train", "hr denoiser, " + std::to_string(cfg.hr_denoiser.iterations) + " iterations");
    save_denoiser(P.hr_denoiser(), train_hr_denoiser(train, cfg.hr_denoiser),
                  nullptr, {{"train_groups", m.train}, {"config", to_json(cfg.hr_denoiser)}});
  }
  write_run_info(P.denoiser(), cfg, "denoise-train");
}

inline TrainedDenoiser load_lr_denoiser(const RunConfig& cfg) {
  const fs::path stem = RunPaths{cfg.output_root}.lr_denoiser();
  if (!fs::exists(stem.string() + ".json")) {
    throw DependencyError("denoise-train", "no LR denoiser checkpoint at '" + stem.string() + ".json'");
  }
  return load_denoiser(stem);
}

/// Adds denoised_lr and noise_map to every group of the dataset.
inline void stage_denoise_apply(const RunConfig& cfg) {
  const RunPaths P{cfg.output_root};
  const SplitManifest m = load_manifest(P.dataset());
  const TrainedDenoiser d = load_lr_denoiser(cfg);
  json counts = json::object();
  for (const auto& id : m.all()) {
    SampleGroup g = attach_denoised(load_group(P.dataset(), id), as_denoise_fn(d, cfg.tiles));
    save_group(g, P.dataset());
    counts[id] = g.provenance["denoise_degenerate_pixels"];
    log_stage("denoise-apply", id);
  }
  write_run_info(P.denoised(), cfg, "denoise-apply", {{"degenerate_pixels", counts}});
}

inline void stage_ddpm_train(const RunConfig& cfg, ConditioningScheme scheme) {
  const RunPaths P{cfg.output_root};
  const SplitManifest m = load_manifest(P.dataset());
  const auto train = load_split(cfg, m.train);
  // dependency check before any training work
  for (const auto& g : train) conditional_images(g, scheme);
  log_stage("ddpm-train", to_string(scheme) + ", " + std::to_string(cfg.diffusion.iterations) + " iterations");
  DiffusionTrainConfig dc = cfg.diffusion;
  dc.seed = derive_seed(cfg.diffusion.seed, static_cast<std::uint64_t>(scheme));
  const TrainedDDPM model = train_ddpm(train, scheme, dc);
  save_ddpm(P.ddpm_checkpoint(scheme), model, {{"train_groups", m.train}});
  write_run_info(P.ddpm(), cfg, "ddpm-train");
}

/// Evaluation slice: explicit id, else first test group, else first validation group.
inline std::string evaluation_group(const RunConfig& cfg, const SplitManifest& m) {
  if (!cfg.eval.group.empty()) {
    const auto all = m.all();
    if (std::find(all.begin(), all.end(), cfg.eval.group) == all.end()) {
      throw ConfigError("config.eval.group '" + cfg.eval.group + "' is not in the dataset manifest");
    }
    return cfg.eval.group;
  }
  return m.test.empty() ? m.validation.front() : m.test.front();
}

inline ImageGrid crop_for_eval(const RunConfig& cfg, const ImageGrid& img) {
  return cfg.eval.sample_roi ? img.crop(*cfg.eval.sample_roi) : img;
}

inline SampleGroup crop_group(const RunConfig& cfg, const SampleGroup& g) {
  SampleGroup c = g;
  for (const auto& n : group_channel_names()) {
    auto& ch = c.channel(n);
    if (ch) ch = crop_for_eval(cfg, *ch);
  }
  return c;
}

inline void stage_ddpm_sample(const RunConfig& cfg, ConditioningScheme scheme, std::optional<int> steps,
                              const std::string& group_override = {}) {
  const RunPaths P{cfg.output_root};
  const SplitManifest m = load_manifest(P.dataset());
  RunConfig c = cfg;
  if (!group_override.empty()) c.eval.group = group_override;
  const std::string gid = evaluation_group(c, m);
  const fs::path stem = P.ddpm_checkpoint(scheme);
  if (!fs::exists(stem.string() + ".json")) {
    throw DependencyError("ddpm-train", "no " + to_string(scheme) + " checkpoint at '" + stem.string() + ".json'");
  }
  const TrainedDDPM model = load_ddpm(stem);
  const SampleGroup g = crop_group(c, load_group(P.dataset(), gid));
  const auto st = steps ? steps : cfg.sample_steps;
  log_stage("ddpm-sample", to_string(scheme) + " on " + gid + (st ? ", " + std::to_string(*st) + " steps" : ""));
  const ImageGrid out = sample_group(model, g, derive_seed(derive_seed(cfg.seed, kSeedSampling), static_cast<std::uint64_t>(scheme)), st);
  const json ctx = {{"group", gid}, {"scheme", to_string(scheme)}, {"steps", st ? *st : model.schedule.T}};
  save_grid(out, P.sample_file(to_string(scheme)), ctx);
  save_grid(*g.lr_a, P.sample_file("lr_input"), {{"group", gid}});
  save_grid(g.require_channel(to_string(model.target), "dataset"), P.sample_file("hr_target"), {{"group", gid}});
  write_run_info(P.samples(), cfg, "ddpm-sample", {{"group", gid}});
}

inline MTFCurve stage_eval_mtf(const fs::path& image, const EdgeSpec& spec, int oversample) {
  if (!fs::exists(image)) throw DependencyError("ddpm-sample", "image '" + image.string() + "' not found");
  return mtf_edge(load_grid(image), spec, oversample);
}

inline RadialPSD stage_eval_psd(const fs::path& image, const Roi& roi, int detrend_order, Taper taper) {
  if (!fs::exists(image)) throw DependencyError("ddpm-sample", "image '" + image.string() + "' not found");
  const ImageGrid img = load_grid(image);
  Patch p = to_patch(img, roi);
  p.source_id = (img.id().empty() ? image.filename().string() : img.id()) + "@(" + std::to_string(roi.row) + "," +
                std::to_string(roi.col) + "," + std::to_string(roi.h) + "x" + std::to_string(roi.w) + ")";
  return noise_psd(p, img.geometry().dy, img.geometry().dx, detrend_order, taper);
}

inline ComparisonReport stage_eval_compare(const RunConfig& cfg) {
  const RunPaths P{cfg.output_root};
  for (const char* n : {"lr_input", "hr_target"})
    if (!fs::exists(P.sample_file(n))) {
      throw DependencyError("ddpm-sample", "no " + std::string(n) + " under '" + P.samples().string() + "'");
    }
  const ImageGrid lr = load_grid(P.sample_file("lr_input"));
  const ImageGrid hr = load_grid(P.sample_file("hr_target"));
  std::vector<NamedImage> outs;
  for (auto s : cfg.schemes) {
    const fs::path f = P.sample_file(to_string(s));
    outs.push_back({to_string(s), fs::exists(f) ? std::optional<ImageGrid>(load_grid(f)) : std::nullopt});
  }
  ComparisonReport rep = compare_schemes(outs, lr, hr, cfg.eval.compare);
  write_report(rep, P.report(), {{"compare", to_json(cfg.eval.compare)}});
  write_run_info(P.report(), cfg, "eval-compare");
  for (const auto& w : rep.warnings) log_stage("eval-compare", "warning: " + w);
  return rep;
}

/// All stages in order.
inline ComparisonReport run_pipeline(const RunConfig& cfg) {
  const RunPaths P{cfg.output_root};
  fs::create_directories(P.root);
  write_run_info(P.root, cfg, "pipeline");
  stage_phantom(cfg);
  stage_dataset(cfg);
  stage_denoise_train(cfg, DenoiserKind::Both);
  stage_denoise_apply(cfg);
  for (auto s : cfg.schemes) stage_ddpm_train(cfg, s);
  for (auto s : cfg.schemes) stage_ddpm_sample(cfg, s, std::nullopt);
  return stage_eval_compare(cfg);
}

/// sha256 of every regular file under `root` except the listed extensions.
inline std::map<std::string, std::string> tree_checksums(const fs::path& root,
                                                         const std::vector<std::string>& skip_ext = {".svg"}) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string ext = e.path().extension().string();
    if (std::find(skip_ext.begin(), skip_ext.end(), ext) != skip_ext.end()) continue;
    out[fs::relative(e.path(), root).generic_string()] = sha256_file(e.path());
  }
  return out;
}

}  // namespace pcct
