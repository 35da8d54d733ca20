#include <atomic>

#include "scorewatch/calibrate.hpp"
#include "scorewatch/detect.hpp"
#include "scorewatch/parallel.hpp"
#include "scorewatch/rng.hpp"

namespace scorewatch::calib {

std::vector<std::pair<double, double>> bootstrap_statistics(const ModelProgram& program,
                                                            const ObservationSequence& data,
                                                            const Eigen::VectorXd& theta_hat,
                                                            const detect::DetectConfig& sweep,
                                                            const BootstrapOptions& options) {
  if (options.replicates < 1) throw CalibrationError("bootstrap needs at least one replicate");
  const int n = data.n();

  detect::DetectConfig replicate_config = sweep;
  replicate_config.bootstrap_replicates = 0;
  replicate_config.theta_hat.resize(0);
  replicate_config.fit_init = theta_hat;  // warm start at the full-sample MLE
  replicate_config.fit_tol = options.fit_tol;
  replicate_config.fit_max_iter = options.fit_max_iter;
  replicate_config.jobs = 1;  // parallelism lives at the replicate level

  std::vector<std::pair<double, double>> results(static_cast<std::size_t>(options.replicates),
                                                 {-1.0, -1.0});
  std::atomic<int> failures{0};

  parallel_chunks(options.replicates, options.jobs, [&](int, int begin, int end) {
    for (int b = begin; b < end; ++b) {
      Rng rng = Rng::stream(options.seed, {0x626F6F74ULL, static_cast<std::uint64_t>(b)});
      try {
        const ObservationSequence sample = program.simulate(theta_hat, theta_hat, n, n, rng);
        const detect::DetectionReport rep = detect::auto_test(program, sample, replicate_config);
        results[static_cast<std::size_t>(b)] = {rep.r_lin, rep.r_scan};
      } catch (const Error&) {
        failures.fetch_add(1);
      }
    }
  });

  std::vector<std::pair<double, double>> kept;
  kept.reserve(results.size());
  for (const auto& r : results) {
    if (r.first >= 0.0) kept.push_back(r);
  }
  if (failures.load() * 10 > options.replicates) {
    throw CalibrationError("more than 10% of bootstrap replicates failed (" +
                           std::to_string(failures.load()) + "/" +
                           std::to_string(options.replicates) + ")");
  }
  return kept;
}

double bootstrap_calibrate(const ModelProgram& program, const ObservationSequence& data,
                           const Eigen::VectorXd& theta_hat, StatisticKind kind,
                           const detect::DetectConfig& sweep, const BootstrapOptions& options) {
  const auto stats = bootstrap_statistics(program, data, theta_hat, sweep, options);
  std::vector<double> values;
  values.reserve(stats.size());
  for (const auto& [lin, scan] : stats) {
    values.push_back(kind == StatisticKind::kLinear ? lin : scan);
  }
  return empirical_upper_quantile(std::move(values), options.alpha);
}

}  // namespace scorewatch::calib
