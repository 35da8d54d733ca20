// scorewatch: score-based changepoint detection for likelihood-trained models.
//
// Subcommands:
//   test       run the auto-test on a dataset with a model spec
//   simulate   run a synthetic power-curve scenario
//   benchmark  compare the direct and CG routes for I^{-1} z
//
// Exit codes for `test`: 0 = no rejection, 2 = change detected, 1 = error.

#include <chrono>
#include <filesystem>
#include <iostream>

#include "scorewatch/detect.hpp"
#include "scorewatch/harness.hpp"
#include "scorewatch/io.hpp"
#include "scorewatch/models.hpp"
#include "scorewatch/version.hpp"

#include "../vendor/CLI11.hpp"

namespace sw = scorewatch;

namespace {

struct CommonOut {
  std::string out_dir{"."};
  bool json_stdout{false};
};

void write_manifest(const CommonOut& out, sw::io::RunManifest manifest, double wall_seconds) {
  manifest.version = sw::kVersion;
  manifest.wall_seconds = wall_seconds;
  const auto path = std::filesystem::path(out.out_dir) / "manifest.json";
  sw::io::write_text_file(path.string(), sw::io::manifest_to_json(manifest).dump(2) + "\n");
}

std::pair<double, double> parse_alpha_split(double alpha, const std::string& split) {
  const auto colon = split.find(':');
  if (colon == std::string::npos) {
    throw sw::ConfigError("--alpha-split must look like '1:1' or '1:0'");
  }
  double a = 0.0;
  double b = 0.0;
  try {
    a = std::stod(split.substr(0, colon));
    b = std::stod(split.substr(colon + 1));
  } catch (const std::exception&) {
    throw sw::ConfigError("--alpha-split must contain two numbers");
  }
  if (a < 0.0 || b < 0.0 || a + b <= 0.0) {
    throw sw::ConfigError("--alpha-split weights must be nonnegative and not both zero");
  }
  return {alpha * a / (a + b), alpha * b / (a + b)};
}

std::pair<double, double> parse_tau_range(const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) throw sw::ConfigError("--tau-range must look like '0.1:0.9'");
  const double lo = std::stod(spec.substr(0, colon));
  const double hi = std::stod(spec.substr(colon + 1));
  if (!(lo > 0.0 && hi < 1.0 && lo < hi)) {
    throw sw::ConfigError("--tau-range fractions must satisfy 0 < lo < hi < 1");
  }
  return {lo, hi};
}

int run_test(const std::string& data_path, const std::string& model_path, double alpha,
             const std::string& alpha_split, int max_card, const std::string& method,
             const std::string& tau_range, const std::vector<int>& restrict_1based,
             int bootstrap, std::uint64_t seed, int jobs, const CommonOut& out) {
  const auto t0 = std::chrono::steady_clock::now();

  const auto model_doc = sw::io::load_config_file(model_path);
  const auto program = sw::models::model_from_json(model_doc);

  sw::ObservationSequence data;
  if (data_path.size() >= 5 && data_path.substr(data_path.size() - 5) == ".json") {
    data = sw::io::data_from_json(sw::io::load_config_file(data_path));
    if (data.prefix_len == 0) data.prefix_len = program->known_prefix();
  } else {
    data = sw::io::read_data_csv(data_path, program->known_prefix());
  }

  sw::detect::DetectConfig config;
  std::tie(config.alpha_l, config.alpha_s) = parse_alpha_split(alpha, alpha_split);
  config.max_cardinality = max_card;
  if (method == "direct") {
    config.method = sw::detect::Method::kDirect;
  } else if (method == "cg") {
    config.method = sw::detect::Method::kCg;
  } else {
    throw sw::ConfigError("--method must be 'direct' or 'cg'");
  }
  std::tie(config.tau_lo_frac, config.tau_hi_frac) = parse_tau_range(tau_range);
  for (int c : restrict_1based) config.restrict_to.push_back(c - 1);
  config.bootstrap_replicates = bootstrap;
  config.bootstrap_seed = seed;
  config.jobs = jobs;

  const sw::detect::DetectionReport report = sw::detect::auto_test(*program, data, config);

  nlohmann::json hashed{{"model", model_doc}, {"config", sw::io::detect_config_to_json(config)},
                        {"seed", seed}};
  const std::string hash = sw::io::config_hash(hashed);

  std::filesystem::create_directories(out.out_dir);
  const auto report_path = std::filesystem::path(out.out_dir) / "report.json";
  const auto trace_path = std::filesystem::path(out.out_dir) / "per_tau.csv";
  const nlohmann::json report_json = sw::io::report_to_json(report, hash);
  sw::io::write_text_file(report_path.string(), report_json.dump(2) + "\n");
  sw::io::write_text_file(trace_path.string(), sw::io::per_tau_csv(report, hash));

  sw::io::RunManifest manifest;
  manifest.command = "test";
  manifest.config_hash = hash;
  manifest.seed = seed;
  manifest.inputs = {data_path, model_path};
  manifest.outputs = {report_path.string(), trace_path.string()};
  write_manifest(out, manifest,
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

  if (out.json_stdout) {
    std::cout << report_json.dump() << "\n";
  } else {
    std::cout << "R_lin = " << report.r_lin << " (threshold "
              << (report.bootstrap ? report.bootstrap_h_lin : report.thresholds.h_lin)
              << "), tau_hat = " << report.tau_hat_lin << "\n";
    std::cout << "R_scan = " << report.r_scan << ", tau_hat = " << report.tau_hat_scan << "\n";
    std::cout << "psi_lin = " << report.psi_lin << ", psi_scan = " << report.psi_scan
              << ", psi_auto = " << report.psi_auto << "\n";
  }
  return report.psi_auto == 1 ? 2 : 0;
}

int run_simulate(const std::string& config_path, bool full_size, std::uint64_t seed_override,
                 bool has_seed, int jobs, const CommonOut& out) {
  const auto t0 = std::chrono::steady_clock::now();
  auto config = sw::harness::ScenarioConfig::from_json(sw::io::load_config_file(config_path));
  if (full_size) config.apply_full_size();
  if (has_seed) config.seed = seed_override;

  const sw::harness::PowerCurve curve = sw::harness::power_curve(config, jobs);

  std::filesystem::create_directories(out.out_dir);
  const auto csv_path = std::filesystem::path(out.out_dir) / (config.name + "_power.csv");
  const auto json_path = std::filesystem::path(out.out_dir) / (config.name + "_power.json");
  sw::io::write_text_file(csv_path.string(), curve.to_csv());
  sw::io::write_text_file(json_path.string(), curve.to_json().dump(2) + "\n");

  sw::io::RunManifest manifest;
  manifest.command = "simulate";
  manifest.config_hash = curve.config_hash;
  manifest.seed = config.seed;
  manifest.inputs = {config_path};
  manifest.outputs = {csv_path.string(), json_path.string()};
  write_manifest(out, manifest,
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

  if (out.json_stdout) {
    std::cout << curve.to_json().dump() << "\n";
  } else {
    std::cout << curve.to_csv();
    if (curve.partial) std::cout << "# warning: more than 5% of repetitions failed\n";
  }
  return 0;
}

int run_benchmark(const std::string& model, const std::vector<int>& n_grid,
                  const std::vector<int>& d_grid, int reps, std::uint64_t seed,
                  const CommonOut& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cells = sw::harness::runtime_benchmark(model, n_grid, d_grid, reps, seed);

  nlohmann::json config{{"model", model}, {"n_grid", n_grid}, {"d_grid", d_grid},
                        {"reps", reps},  {"seed", seed}};
  const std::string hash = sw::io::config_hash(config);

  std::filesystem::create_directories(out.out_dir);
  const auto csv_path = std::filesystem::path(out.out_dir) / "benchmark.csv";
  const auto json_path = std::filesystem::path(out.out_dir) / "benchmark.json";
  sw::io::write_text_file(csv_path.string(), sw::harness::benchmark_to_csv(cells, hash));
  sw::io::write_text_file(json_path.string(),
                          sw::harness::benchmark_to_json(cells, hash).dump(2) + "\n");

  sw::io::RunManifest manifest;
  manifest.command = "benchmark";
  manifest.config_hash = hash;
  manifest.seed = seed;
  manifest.outputs = {csv_path.string(), json_path.string()};
  write_manifest(out, manifest,
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

  if (out.json_stdout) {
    std::cout << sw::harness::benchmark_to_json(cells, hash).dump() << "\n";
  } else {
    std::cout << sw::harness::benchmark_to_csv(cells, hash);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"scorewatch: score-based changepoint detection"};
  app.set_version_flag("--version", sw::kVersion);
  app.require_subcommand(1);

  CommonOut out;
  std::uint64_t seed = 0;
  int jobs = 0;

  // test
  auto* test = app.add_subcommand("test", "run the auto-test on a dataset");
  std::string data_path;
  std::string model_path;
  double alpha = 0.05;
  std::string alpha_split = "1:1";
  int max_card = 0;
  std::string method = "cg";
  std::string tau_range = "0.1:0.9";
  std::vector<int> restrict_1based;
  int bootstrap = 0;
  test->add_option("--data", data_path, "observation CSV or JSON file")->required();
  test->add_option("--model", model_path, "model spec JSON file")->required();
  test->add_option("--alpha", alpha, "total significance level")->check(CLI::Range(1e-12, 0.999));
  test->add_option("--alpha-split", alpha_split, "linear:scan level weights (default 1:1)");
  test->add_option("--max-card", max_card, "scan max cardinality (default floor(sqrt(d)))");
  test->add_option("--method", method, "direct | cg (default cg)");
  test->add_option("--tau-range", tau_range, "scanned fraction range (default 0.1:0.9)");
  test->add_option("--restrict", restrict_1based, "restrict to 1-based component indices");
  test->add_option("--bootstrap", bootstrap, "bootstrap replicates (0 = Bonferroni)");
  test->add_option("--out", out.out_dir, "output directory (default .)");
  test->add_option("--seed", seed, "seed for bootstrap resampling");
  test->add_option("--jobs", jobs, "worker threads (default: logical cores)");
  test->add_flag("--json", out.json_stdout, "print the report JSON on stdout");

  // simulate
  auto* simulate = app.add_subcommand("simulate", "run a synthetic scenario");
  std::string config_path;
  bool full_size = false;
  simulate->add_option("--config", config_path, "scenario JSON/TOML file")->required();
  simulate->add_flag("--full-size", full_size, "apply the scenario's full-size overrides");
  auto* seed_opt = simulate->add_option("--seed", seed, "override the scenario seed");
  simulate->add_option("--out", out.out_dir, "output directory (default .)");
  simulate->add_option("--jobs", jobs, "worker threads (default: logical cores)");
  simulate->add_flag("--json", out.json_stdout, "print the curve JSON on stdout");

  // benchmark
  auto* benchmark = app.add_subcommand("benchmark", "direct vs CG runtime comparison");
  std::string bench_model = "linear";
  std::vector<int> n_grid;
  std::vector<int> d_grid;
  int bench_reps = 5;
  benchmark->add_option("--model", bench_model, "linear | mlp");
  benchmark->add_option("--n-grid", n_grid, "sample sizes")->required();
  benchmark->add_option("--d-grid", d_grid, "dimensions (input dims r for mlp)")->required();
  benchmark->add_option("--reps", bench_reps, "repetitions per cell (default 5)");
  benchmark->add_option("--seed", seed, "rng seed");
  benchmark->add_option("--out", out.out_dir, "output directory (default .)");
  benchmark->add_flag("--json", out.json_stdout, "print the table JSON on stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (test->parsed()) {
      return run_test(data_path, model_path, alpha, alpha_split, max_card, method, tau_range,
                      restrict_1based, bootstrap, seed, jobs, out);
    }
    if (simulate->parsed()) {
      return run_simulate(config_path, full_size, seed, seed_opt->count() > 0, jobs, out);
    }
    if (benchmark->parsed()) {
      return run_benchmark(bench_model, n_grid, d_grid, bench_reps, seed, out);
    }
  } catch (const sw::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
