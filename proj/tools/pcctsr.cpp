#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "pcct/pipeline.hpp"

using namespace pcct;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kDependency = 3, kNumerical = 4 };

Roi parse_roi(const std::string& s) {
  Roi r;
  char c1 = 0, c2 = 0, c3 = 0;
  std::istringstream in(s);
  if (!(in >> r.row >> c1 >> r.col >> c2 >> r.h >> c3 >> r.w) || c1 != ',' || c2 != ',' || c3 != ',' ||
      !in.eof()) {
    throw ConfigError("--roi expects row,col,h,w; got '" + s + "'");
  }
  require(r.h > 0 && r.w > 0, "--roi: h and w must be positive");
  return r;
}

std::size_t find_phantom(const RunConfig& cfg, const std::string& key) {
  const auto& ps = cfg.dataset.phantoms;
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (ps[i].spec.id == key || group_id(ps[i], static_cast<int>(i)) == key) return i;
  try {
    std::size_t pos = 0;
    const unsigned long idx = std::stoul(key, &pos);
    if (pos == key.size()) return idx;
  } catch (const std::exception&) {
  }
  throw ConfigError("--phantom '" + key + "' matches no phantom id or index in config.phantoms");
}

Protocol protocol_from_string(const std::string& s) {
  if (s == "lr") return Protocol::LR;
  if (s == "hr") return Protocol::HR;
  throw ConfigError("--protocol must be lr or hr; got '" + s + "'");
}

void emit(const json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    write_json(out, j);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Photon-counting CT super-resolution with a conditional diffusion model", kToolName};
  app.set_version_flag("--version", std::string(kToolName) + " " + kToolVersion);
  app.require_subcommand(1);

  std::optional<std::string> config_file, output_root;
  std::optional<std::uint64_t> seed;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", config_file, "JSON run configuration");
    s->add_option("--seed", seed, "global seed");
    s->add_option("--output-root", output_root, "output directory (overrides " + std::string(kOutputRootEnv) + ")");
    s->allow_extras();
    s->footer("Any config key can be overridden with --section.key value, e.g. --diffusion.T 200");
    return s;
  };

  auto* phantom = common(app.add_subcommand("phantom", "render the configured phantoms"));

  std::string sim_phantom = "0", sim_protocol = "lr";
  auto* simulate = common(app.add_subcommand("simulate", "simulate and reconstruct one phantom"));
  simulate->add_option("--phantom", sim_phantom, "phantom id or index")->capture_default_str();
  simulate->add_option("--protocol", sim_protocol, "lr|hr")->capture_default_str();

  auto* dataset = common(app.add_subcommand("dataset", "build the paired dataset"));

  std::string kind = "both";
  auto* dtrain = common(app.add_subcommand("denoise-train", "train the LR and/or HR denoiser"));
  dtrain->add_option("--kind", kind, "lr|hr|both")->capture_default_str();

  auto* dapply = common(app.add_subcommand("denoise-apply", "split every LR image into denoised and noise channels"));

  std::string train_scheme = "noise_split";
  auto* ddtrain = common(app.add_subcommand("ddpm-train", "train the conditional diffusion model"));
  ddtrain->add_option("--scheme", train_scheme, "plain|noise_split|denoise_only")->capture_default_str();

  std::string sample_scheme = "noise_split", sample_group;
  std::optional<int> steps;
  auto* ddsample = common(app.add_subcommand("ddpm-sample", "super-resolve the evaluation slice"));
  ddsample->add_option("--scheme", sample_scheme, "plain|noise_split|denoise_only")->capture_default_str();
  ddsample->add_option("--steps", steps, "respaced number of reverse steps");
  ddsample->add_option("--group", sample_group, "dataset group id");

  std::string image, roi_text, out;
  double angle = 3.0;
  int oversample = 4, detrend_order = 1;
  std::string taper = "hann";
  auto* emtf = common(app.add_subcommand("eval-mtf", "edge MTF of an image region"));
  emtf->add_option("--image", image, "image .raw file")->required();
  emtf->add_option("--roi", roi_text, "row,col,h,w")->required();
  emtf->add_option("--angle", angle, "nominal edge angle in degrees")->capture_default_str();
  emtf->add_option("--oversample", oversample)->capture_default_str();
  emtf->add_option("--out", out, "write JSON here instead of stdout");

  auto* epsd = common(app.add_subcommand("eval-psd", "noise power spectrum of an image region"));
  epsd->add_option("--image", image, "image .raw file")->required();
  epsd->add_option("--roi", roi_text, "row,col,h,w")->required();
  epsd->add_option("--detrend", detrend_order)->capture_default_str();
  epsd->add_option("--taper", taper, "hann|none")->capture_default_str();
  epsd->add_option("--out", out, "write JSON here instead of stdout");

  auto* ecompare = common(app.add_subcommand("eval-compare", "compare scheme outputs and write the report"));
  auto* pipeline = common(app.add_subcommand("pipeline", "run every stage in order"));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    const RunConfig cfg = load_run_config(config_file ? std::optional<fs::path>(*config_file) : std::nullopt,
                                          sub->remaining(), seed, output_root);
    if (sub == phantom) {
      stage_phantom(cfg);
    } else if (sub == simulate) {
      stage_simulate(cfg, find_phantom(cfg, sim_phantom), protocol_from_string(sim_protocol));
    } else if (sub == dataset) {
      stage_dataset(cfg);
    } else if (sub == dtrain) {
      stage_denoise_train(cfg, denoiser_kind_from_string(kind));
    } else if (sub == dapply) {
      stage_denoise_apply(cfg);
    } else if (sub == ddtrain) {
      stage_ddpm_train(cfg, conditioning_scheme_from_string(train_scheme));
    } else if (sub == ddsample) {
      if (steps) require(*steps >= 1, "--steps must be positive");
      stage_ddpm_sample(cfg, conditioning_scheme_from_string(sample_scheme), steps, sample_group);
    } else if (sub == emtf) {
      EdgeSpec spec;
      spec.roi = parse_roi(roi_text);
      spec.angle_deg = angle;
      emit(to_json(stage_eval_mtf(image, spec, oversample)), out);
    } else if (sub == epsd) {
      emit(to_json(stage_eval_psd(image, parse_roi(roi_text), detrend_order, taper_from_string(taper))), out);
    } else if (sub == ecompare) {
      stage_eval_compare(cfg);
    } else if (sub == pipeline) {
      run_pipeline(cfg);
    }
  } catch (const ConfigError& e) {
    std::cerr << kToolName << ": config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DependencyError& e) {
    std::cerr << kToolName << ": " << e.what() << "\n";
    return kDependency;
  } catch (const NumericalError& e) {
    std::cerr << kToolName << ": numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << kToolName << ": error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
