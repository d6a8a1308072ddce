#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pcct/pipeline.hpp"

using namespace pcct;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code;
  std::string err;
  std::string out;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("pcct_test_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

RunResult run_cli(const std::string& args, const std::string& env = {}) {
  const fs::path log = fs::temp_directory_path() / "pcct_test_cli_stderr.txt";
  const fs::path out = fs::temp_directory_path() / "pcct_test_cli_stdout.txt";
  const std::string cmd =
      env + " " + PCCTSR_PATH + " " + args + " >" + out.string() + " 2>" + log.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log), slurp(out)};
}

json tiny_config(const fs::path& root) {
  json phantoms = json::array();
  for (int i = 0; i < 3; ++i)
    phantoms.push_back({{"kind", "uniform-disk"},
                        {"id", "d" + std::to_string(i)},
                        {"rows", 128},
                        {"cols", 128},
                        {"disk_radius_mm", 28.0},
                        {"disk_hu", 20.0 * i}});
  return {{"seed", 5},
          {"output_root", root.string()},
          {"phantoms", phantoms},
          {"geometry", {{"n_views", 240}, {"n_channels", 192}, {"detector_pitch_mm", 0.5}}},
          {"denoiser", {{"lr", {{"iterations", 2}, {"batch_size", 1}, {"patch_size", 32}, {"net", {{"base_width", 8}}}}},
                        {"hr", {{"iterations", 2}, {"batch_size", 1}, {"patch_size", 32}, {"net", {{"base_width", 8}}}}}}},
          {"diffusion",
           {{"iterations", 2}, {"batch_size", 1}, {"patch_size", 32}, {"T", 10}, {"net", {{"base_width", 8}}}}},
          {"eval", {{"sample_roi", {{"row", 32}, {"col", 32}, {"h", 64}, {"w", 64}}}}}};
}

fs::path write_config(const fs::path& dir, const json& j) {
  const fs::path p = dir / "config.json";
  write_json(p, j);
  return p;
}

}  // namespace

TEST(RunConfigTest, ResolvedConfigRoundTrips) {
  const RunConfig a = load_run_config(std::nullopt, {}, 7, std::string("/tmp/x"));
  const json ja = to_json(a);
  const RunConfig b = run_config_from_json(ja);
  EXPECT_EQ(to_json(b), ja);
  EXPECT_EQ(b.seed, 7u);
  EXPECT_EQ(b.lr_denoiser.seed, a.lr_denoiser.seed);
  EXPECT_EQ(b.diffusion.seed, a.diffusion.seed);
  EXPECT_EQ(a.diffusion.T, 2000);
  EXPECT_EQ(a.schemes.size(), 3u);
  const RunConfig whole = run_config_from_json({{"eval", {{"sample_roi", nullptr}}}});
  EXPECT_FALSE(whole.eval.sample_roi.has_value());
  EXPECT_EQ(to_json(run_config_from_json(to_json(whole))), to_json(whole));
}

TEST(RunConfigTest, UnknownKeysAreListed) {
  try {
    run_config_from_json({{"seed", 1}, {"difusion", {{"T", 3}}}});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("difusion"), std::string::npos) << e.what();
  }
  try {
    run_config_from_json({{"diffusion", {{"T", 10}, {"betta", 0.1}}}});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("betta"), std::string::npos) << e.what();
  }
  EXPECT_THROW(run_config_from_json({{"diffusion", {{"seed", 3}}}}), ConfigError);
  EXPECT_THROW(run_config_from_json({{"phantoms", {{{"kind", "edge"}, {"split", "sideways"}}}}}), ConfigError);
}

TEST(RunConfigTest, StageSeedsFollowGlobalSeed) {
  const RunConfig a = run_config_from_json({{"seed", 1}});
  const RunConfig b = run_config_from_json({{"seed", 2}});
  EXPECT_NE(a.diffusion.seed, b.diffusion.seed);
  EXPECT_NE(a.lr_denoiser.seed, a.hr_denoiser.seed);
}

TEST(RunConfigTest, OverridesSetNestedKeys) {
  json j = {{"phantoms", {{{"kind", "edge"}}}}};
  apply_overrides(j, {"--diffusion.T", "200", "--eval.taper=none", "--phantoms.0.edge_angle_deg", "5"});
  EXPECT_EQ(j["diffusion"]["T"], 200);
  EXPECT_EQ(j["eval"]["taper"], "none");
  EXPECT_EQ(j["phantoms"][0]["edge_angle_deg"], 5);
  const RunConfig c = run_config_from_json(j);
  EXPECT_EQ(c.diffusion.T, 200);
  EXPECT_EQ(c.eval.compare.taper, Taper::None);
  EXPECT_DOUBLE_EQ(c.dataset.phantoms[0].spec.edge_angle_deg, 5.0);
  EXPECT_THROW(apply_overrides(j, {"--diffusion.T"}), ConfigError);
  EXPECT_THROW(apply_overrides(j, {"--phantoms.4.kind", "edge"}), ConfigError);
  EXPECT_THROW(apply_overrides(j, {"stray"}), ConfigError);
}

TEST(RunConfigTest, FlagsOutrankFileAndOverrides) {
  const fs::path dir = scratch("precedence");
  const fs::path file = write_config(dir, {{"seed", 3}, {"output_root", "from_file"}});
  EXPECT_EQ(load_run_config(file, {}, std::nullopt, std::nullopt).output_root, "from_file");
  EXPECT_EQ(load_run_config(file, {"--output_root", "from_override"}, std::nullopt, std::nullopt).output_root,
            "from_override");
  const RunConfig c = load_run_config(file, {"--seed", "4"}, 9, std::string("from_flag"));
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.output_root, "from_flag");
  EXPECT_THROW(load_run_config(dir / "absent.json", {}, std::nullopt, std::nullopt), ConfigError);
}

TEST(CliTest, ParseErrorsExitWithConfigCode) {
  EXPECT_EQ(run_cli("").code, 2);
  EXPECT_EQ(run_cli("no-such-stage").code, 2);
  EXPECT_EQ(run_cli("--version").code, 0);
  const RunResult r = run_cli("phantom --output-root /tmp/pcct_test_cli_unused --bogus.key 1");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("bogus"), std::string::npos) << r.err;
}

TEST(CliTest, MissingUpstreamStagesAreNamed) {
  const fs::path dir = scratch("deps");
  const fs::path cfg = write_config(dir, tiny_config(dir / "out"));
  const std::string c = "--config " + cfg.string();

  RunResult r = run_cli("ddpm-train --scheme plain " + c);
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("'dataset'"), std::string::npos) << r.err;

  ASSERT_EQ(run_cli("dataset " + c).code, 0);
  r = run_cli("denoise-apply " + c);
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("'denoise-train'"), std::string::npos) << r.err;

  r = run_cli("ddpm-train --scheme noise_split " + c);
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("'denoise-apply'"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "out" / "ddpm" / "noise_split.json"));

  r = run_cli("ddpm-sample --scheme plain " + c);
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("'ddpm-train'"), std::string::npos) << r.err;

  r = run_cli("eval-compare " + c);
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("'ddpm-sample'"), std::string::npos) << r.err;
}

TEST(CliTest, StagesChainOnTinyConfig) {
  const fs::path dir = scratch("chain");
  const fs::path out = dir / "out";
  const fs::path cfg = write_config(dir, tiny_config(out));
  const std::string c = "--config " + cfg.string();
  ASSERT_EQ(run_cli("dataset " + c).code, 0);
  ASSERT_EQ(run_cli("denoise-train --kind lr " + c).code, 0);
  ASSERT_EQ(run_cli("denoise-apply " + c).code, 0);
  ASSERT_EQ(run_cli("ddpm-train --scheme noise_split " + c).code, 0);
  ASSERT_EQ(run_cli("ddpm-sample --scheme noise_split --steps 4 " + c).code, 0);
  const RawArray s = load_raw(out / "samples" / "noise_split.raw");
  EXPECT_EQ(s.geometry.rows, 64);
  EXPECT_EQ(s.extra.at("steps"), 4);
  for (const char* d : {"dataset", "denoiser", "denoise-apply", "ddpm", "samples"}) {
    const json info = read_json(out / d / "run.json");
    EXPECT_EQ(info.at("tool"), "pcctsr") << d;
    EXPECT_EQ(info.at("version"), kToolVersion) << d;
    EXPECT_EQ(info.at("config"), to_json(load_run_config(cfg, {}, std::nullopt, std::nullopt))) << d;
  }
  const SampleGroup g = load_group(out / "dataset", "g000_d0");
  EXPECT_TRUE(g.denoised_lr.has_value());
  EXPECT_TRUE(g.noise_map.has_value());
}

TEST(CliTest, StagesAreIdempotent) {
  const fs::path dir = scratch("idem");
  const fs::path cfg = write_config(dir, tiny_config(dir / "out"));
  ASSERT_EQ(run_cli("dataset --config " + cfg.string()).code, 0);
  const auto first = tree_checksums(dir / "out");
  ASSERT_EQ(run_cli("dataset --config " + cfg.string()).code, 0);
  EXPECT_EQ(tree_checksums(dir / "out"), first);
}

TEST(CliTest, EnvironmentSelectsOutputRoot) {
  const fs::path dir = scratch("env");
  const fs::path cfg = write_config(dir, tiny_config(dir / "from_file"));
  ASSERT_EQ(run_cli("phantom --config " + cfg.string(), "PCCT_OUTPUT_ROOT=" + (dir / "from_env").string()).code, 0);
  EXPECT_TRUE(fs::exists(dir / "from_env" / "phantoms" / "run.json"));
  EXPECT_FALSE(fs::exists(dir / "from_file"));
  ASSERT_EQ(run_cli("phantom --config " + cfg.string() + " --output-root " + (dir / "from_flag").string(),
                    "PCCT_OUTPUT_ROOT=" + (dir / "from_env2").string())
                .code,
            0);
  EXPECT_TRUE(fs::exists(dir / "from_flag" / "phantoms" / "run.json"));
  EXPECT_FALSE(fs::exists(dir / "from_env2"));
}

TEST(CliTest, SmallPsdPatchReportsPatchId) {
  const fs::path dir = scratch("psd");
  std::mt19937_64 rng(1);
  std::normal_distribution<float> nd(0.0f, 10.0f);
  std::vector<float> v(64 * 64);
  for (auto& x : v) x = nd(rng);
  save_grid(ImageGrid(GridGeometry::centered(64, 64, 0.5, 0.5), v, "noise_slice_7"), dir / "n.raw");
  const RunResult bad = run_cli("eval-psd --image " + (dir / "n.raw").string() + " --roi 4,4,16,16");
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("noise_slice_7"), std::string::npos) << bad.err;
  EXPECT_NE(bad.err.find("16x16"), std::string::npos) << bad.err;
  const RunResult ok = run_cli("eval-psd --image " + (dir / "n.raw").string() + " --roi 0,0,64,64");
  ASSERT_EQ(ok.code, 0) << ok.err;
  EXPECT_TRUE(json::parse(ok.out).contains("power_fraction_percent"));
  EXPECT_EQ(run_cli("eval-psd --image " + (dir / "n.raw").string() + " --roi 1,2,3").code, 2);
}

TEST(CliTest, EdgeMtfFromImage) {
  const fs::path dir = scratch("mtf");
  PhantomSpec s;
  s.kind = PhantomKind::Edge;
  s.rows = s.cols = 128;
  save_grid(render_phantom(s, 0), dir / "edge.raw");
  const RunResult r =
      run_cli("eval-mtf --image " + (dir / "edge.raw").string() + " --roi 32,32,64,64 --angle 3 --out " +
              (dir / "mtf.json").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const json j = read_json(dir / "mtf.json");
  EXPECT_FALSE(j.at("mtf50_per_mm").is_null());
  EXPECT_EQ(run_cli("eval-mtf --image " + (dir / "absent.raw").string() + " --roi 0,0,8,8").code, 3);
}
