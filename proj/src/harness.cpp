#include "scorewatch/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <sstream>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "scorewatch/calibrate.hpp"
#include "scorewatch/fit.hpp"
#include "scorewatch/io.hpp"
#include "scorewatch/parallel.hpp"

namespace scorewatch::harness {

ScenarioModel ScenarioModel::from_json(const nlohmann::json& doc) {
  ScenarioModel m;
  m.kind = doc.at("kind").get<std::string>();
  m.d = doc.value("d", 21);
  m.r = doc.value("r", m.kind == "arma" ? 3 : 6);
  m.q = doc.value("q", m.kind == "arma" ? 2 : 0);
  m.states = doc.value("states", 3);
  m.vocab = doc.value("vocab", 6);
  m.sigma = doc.value("sigma", m.kind == "arma" ? 0.1 : 1.0);
  m.root_lo = doc.value("root_lo", 1.5);
  m.root_hi = doc.value("root_hi", 3.0);
  return m;
}

nlohmann::json ScenarioModel::to_json() const {
  return {{"kind", kind},    {"d", d},         {"r", r},
          {"q", q},          {"states", states}, {"vocab", vocab},
          {"sigma", sigma},  {"root_lo", root_lo}, {"root_hi", root_hi}};
}

namespace {

// Row construction from the appendix recipe: a floor of 1/(2N) per entry plus
// half of a Dirichlet(0.5) draw, which keeps entries positive and rows
// stochastic.
Eigen::VectorXd stochastic_row(int n_entries, Rng& rng) {
  const Eigen::VectorXd dir = rng.dirichlet(0.5, n_entries);
  return Eigen::VectorXd::Constant(n_entries, 0.5 / n_entries) + 0.5 * dir;
}

}  // namespace

ModelDraw draw_model(const ScenarioModel& family, Rng& rng) {
  ModelDraw draw;
  draw.kind = family.kind;
  if (family.kind == "linear") {
    draw.program = models::linear_model(family.d, family.sigma);
    draw.theta0 = Eigen::VectorXd::Zero(family.d);
  } else if (family.kind == "mlp") {
    draw.program = models::mlp_model(family.r, family.sigma);
    draw.theta0 = 0.5 * rng.normal_vector(models::mlp_dim(family.r));
  } else if (family.kind == "arma") {
    Eigen::VectorXd ar(family.r);
    Eigen::VectorXd ma(family.q);
    for (int i = 0; i < family.r; ++i) ar[i] = rng.uniform(family.root_lo, family.root_hi);
    for (int i = 0; i < family.q; ++i) ma[i] = rng.uniform(family.root_lo, family.root_hi);
    const auto spec = models::ArmaSpec::from_roots(ar, ma, family.sigma);
    draw.arma = spec;
    draw.program = models::arma_loglik(spec);
    draw.theta0 = spec.theta0();
  } else if (family.kind == "hmm") {
    models::HmmSpec spec = models::HmmSpec::standard(family.states);
    for (int i = 0; i < family.states; ++i) {
      spec.transition.row(i) = stochastic_row(family.states, rng).transpose();
    }
    spec.validate();
    draw.program = models::hmm_loglik(spec);
    draw.theta0 = spec.theta0();
  } else if (family.kind == "topic") {
    const int N = family.states;
    const int M = family.vocab;
    if (M < N) throw ConfigError("topic scenario needs vocab >= states");
    models::TopicModelSpec spec;
    spec.num_states = N;
    spec.vocab = M;
    spec.state_map.resize(static_cast<std::size_t>(M));
    for (int x = 0; x < M; ++x) spec.state_map[static_cast<std::size_t>(x)] = (x * N) / M;
    spec.transition.resize(N, N);
    for (int i = 0; i < N; ++i) spec.transition.row(i) = stochastic_row(N, rng).transpose();
    spec.emission.resize(M);
    const auto blocks = spec.state_words();
    for (const auto& block : blocks) {
      const Eigen::VectorXd g = stochastic_row(static_cast<int>(block.size()), rng);
      for (std::size_t j = 0; j < block.size(); ++j) {
        spec.emission[block[j]] = g[static_cast<Eigen::Index>(j)];
      }
    }
    spec.validate();
    draw.program = models::topic_model_loglik(spec);
    draw.theta0 = spec.theta0();
  } else {
    throw ConfigError("unknown scenario model kind '" + family.kind + "'");
  }
  return draw;
}

std::pair<Eigen::VectorXd, Eigen::VectorXd> plant_change(const ModelDraw& draw, int p,
                                                         double delta) {
  const int d = draw.program->dim();
  if (p < 1 || p > d) throw DomainError("sparsity p must be in [1, d]");
  Eigen::VectorXd theta1 = draw.theta0;
  if (draw.kind == "arma") {
    // Shift the AR construction roots and re-extract the coefficients.
    const auto& spec = *draw.arma;
    if (spec.ar_roots.size() == 0) {
      throw DomainError("arma change planting needs construction roots");
    }
    const Eigen::VectorXd shifted = spec.ar_roots.array() + delta;
    if ((shifted.array().abs() <= 1.0).any()) {
      throw DomainError("post-change AR roots violate stationarity");
    }
    theta1.head(spec.r) = models::ar_coefficients_from_roots(shifted);
  } else if (draw.kind == "hmm") {
    // Move delta of mass from the (1,1) transition entry onto the implied
    // last column of row 1.
    theta1[0] -= delta;
    if (!draw.program->in_domain(theta1)) {
      throw DomainError("post-change transition row leaves the simplex");
    }
  } else {
    for (int i = 0; i < p; ++i) theta1[i] += delta;
    if (!draw.program->in_domain(theta1)) {
      throw DomainError("post-change parameters leave the admissible domain");
    }
  }
  return {draw.theta0, theta1};
}

ObservationSequence simulate(const ModelDraw& draw, const Eigen::VectorXd& theta0,
                             const Eigen::VectorXd& theta1, int tau, int n, Rng& rng) {
  return draw.program->simulate(theta0, theta1, tau, n, rng);
}

ScenarioConfig ScenarioConfig::from_json(const nlohmann::json& doc) {
  ScenarioConfig cfg;
  cfg.name = doc.value("name", "scenario");
  cfg.model = ScenarioModel::from_json(doc.at("model"));
  cfg.n = doc.value("n", 400);
  cfg.tau = doc.value("tau", 0);
  cfg.p = doc.value("p", 1);
  if (doc.contains("delta_grid")) {
    cfg.delta_grid.clear();
    for (const auto& v : doc.at("delta_grid")) cfg.delta_grid.push_back(v.get<double>());
  }
  cfg.reps = doc.value("reps", 200);
  cfg.seed = doc.value("seed", static_cast<std::uint64_t>(1));
  cfg.test = doc.contains("test") ? io::detect_config_from_json(doc.at("test"))
                                  : detect::DetectConfig{};
  if (doc.contains("full_size")) {
    const auto& fs = doc.at("full_size");
    if (fs.contains("n")) cfg.full_n = fs.at("n").get<int>();
    if (fs.contains("d")) cfg.full_d = fs.at("d").get<int>();
    if (fs.contains("reps")) cfg.full_reps = fs.at("reps").get<int>();
  }
  return cfg;
}

nlohmann::json ScenarioConfig::to_json() const {
  nlohmann::json doc;
  doc["name"] = name;
  doc["model"] = model.to_json();
  doc["n"] = n;
  doc["tau"] = tau;
  doc["p"] = p;
  doc["delta_grid"] = delta_grid;
  doc["reps"] = reps;
  doc["seed"] = seed;
  doc["test"] = io::detect_config_to_json(test);
  return doc;
}

void ScenarioConfig::apply_full_size() {
  if (full_n) n = *full_n;
  if (full_d) model.d = *full_d;
  if (full_reps) reps = *full_reps;
}

nlohmann::json PowerCurve::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& row : rows) {
    rows_json.push_back({{"delta", row.delta},
                         {"reps", row.reps_done},
                         {"failures", row.failures},
                         {"lin_rate", row.lin_rate},
                         {"lin_se", row.lin_se},
                         {"scan_rate", row.scan_rate},
                         {"scan_se", row.scan_se},
                         {"auto_rate", row.auto_rate},
                         {"auto_se", row.auto_se}});
  }
  return {{"config_hash", config_hash}, {"config", config_echo}, {"partial", partial},
          {"rows", rows_json}};
}

std::string PowerCurve::to_csv() const {
  std::ostringstream out;
  out << "config_hash,delta,reps,failures,lin_rate,lin_se,scan_rate,scan_se,auto_rate,auto_se\n";
  out.precision(12);
  for (const auto& row : rows) {
    out << config_hash << "," << row.delta << "," << row.reps_done << "," << row.failures << ","
        << row.lin_rate << "," << row.lin_se << "," << row.scan_rate << "," << row.scan_se << ","
        << row.auto_rate << "," << row.auto_se << "\n";
  }
  return out.str();
}

namespace {

struct RepOutcome {
  bool failed{true};
  int lin{0};
  int scan{0};
  int aut{0};
};

double rate_se(double rate, int reps) {
  return reps > 0 ? std::sqrt(rate * (1.0 - rate) / reps) : 0.0;
}

std::filesystem::path cache_dir_for(const std::string& hash) {
  const char* env = std::getenv("SCOREWATCH_CACHE");
  if (env == nullptr || *env == '\0') return {};
  return std::filesystem::path(env) / hash;
}

}  // namespace

PowerCurve power_curve(const ScenarioConfig& config, int jobs) {
  if (config.delta_grid.empty()) throw ConfigError("scenario needs a delta grid");
  bool has_zero = false;
  for (double d : config.delta_grid) has_zero |= d == 0.0;
  if (!has_zero) throw ConfigError("delta grid must include 0 (the false-alarm point)");
  if (config.reps < 1) throw ConfigError("scenario needs reps >= 1");

  PowerCurve curve;
  curve.config_echo = config.to_json();
  curve.config_hash = io::config_hash(curve.config_echo);

  const std::filesystem::path cache = cache_dir_for(curve.config_hash);
  if (!cache.empty()) std::filesystem::create_directories(cache);

  const int deltas = static_cast<int>(config.delta_grid.size());
  const int total = deltas * config.reps;
  std::vector<RepOutcome> outcomes(static_cast<std::size_t>(total));

  parallel_chunks(total, jobs, [&](int, int begin, int end) {
    for (int task = begin; task < end; ++task) {
      const int di = task / config.reps;
      const int rep = task % config.reps;
      const double delta = config.delta_grid[static_cast<std::size_t>(di)];
      RepOutcome& out = outcomes[static_cast<std::size_t>(task)];

      std::filesystem::path cache_file;
      if (!cache.empty()) {
        cache_file = cache / ("d" + std::to_string(di) + "_r" + std::to_string(rep) + ".json");
        std::error_code ec;
        if (std::filesystem::exists(cache_file, ec)) {
          try {
            const auto doc = nlohmann::json::parse(io::read_text_file(cache_file.string()));
            out.failed = doc.value("failed", true);
            out.lin = doc.value("lin", 0);
            out.scan = doc.value("scan", 0);
            out.aut = doc.value("auto", 0);
            continue;
          } catch (const std::exception&) {
            // fall through and recompute
          }
        }
      }

      try {
        Rng rng_model = Rng::stream(config.seed, {1, static_cast<std::uint64_t>(di),
                                                  static_cast<std::uint64_t>(rep)});
        const ModelDraw draw = draw_model(config.model, rng_model);
        const auto [theta0, theta1] = plant_change(draw, config.p, delta);
        const int tau = config.tau > 0 ? config.tau : config.n / 2;
        Rng rng_sim = Rng::stream(config.seed, {2, static_cast<std::uint64_t>(di),
                                                static_cast<std::uint64_t>(rep)});
        const ObservationSequence data =
            simulate(draw, theta0, theta1, tau, config.n, rng_sim);

        detect::DetectConfig test = config.test;
        test.theta_hat.resize(0);
        test.fit_init = theta0;
        test.jobs = 1;
        test.bootstrap_seed = Rng::stream(config.seed, {3, static_cast<std::uint64_t>(di),
                                                        static_cast<std::uint64_t>(rep)})
                                  .next_u64();
        const detect::DetectionReport report = detect::auto_test(*draw.program, data, test);
        out.failed = false;
        out.lin = report.psi_lin;
        out.scan = report.psi_scan;
        out.aut = report.psi_auto;
      } catch (const Error&) {
        out.failed = true;
      }

      if (!cache_file.empty()) {
        const nlohmann::json doc{{"failed", out.failed}, {"lin", out.lin},
                                 {"scan", out.scan},     {"auto", out.aut}};
        try {
          io::write_text_file(cache_file.string(), doc.dump());
        } catch (const std::exception&) {
          // cache writes are best effort
        }
      }
    }
  });

  int total_failures = 0;
  for (int di = 0; di < deltas; ++di) {
    DeltaRow row;
    row.delta = config.delta_grid[static_cast<std::size_t>(di)];
    int lin = 0;
    int scan = 0;
    int aut = 0;
    for (int rep = 0; rep < config.reps; ++rep) {
      const RepOutcome& out = outcomes[static_cast<std::size_t>(di * config.reps + rep)];
      if (out.failed) {
        ++row.failures;
        continue;
      }
      ++row.reps_done;
      lin += out.lin;
      scan += out.scan;
      aut += out.aut;
    }
    if (row.reps_done > 0) {
      row.lin_rate = static_cast<double>(lin) / row.reps_done;
      row.scan_rate = static_cast<double>(scan) / row.reps_done;
      row.auto_rate = static_cast<double>(aut) / row.reps_done;
      row.lin_se = rate_se(row.lin_rate, row.reps_done);
      row.scan_se = rate_se(row.scan_rate, row.reps_done);
      row.auto_se = rate_se(row.auto_rate, row.reps_done);
    }
    total_failures += row.failures;
    curve.rows.push_back(row);
  }
  curve.partial = total_failures * 20 > total;  // more than 5% failed
  return curve;
}

KsReport null_distribution_check(const ScenarioModel& family, const NullCheckOptions& options) {
  const int n = options.n;
  const int tau = options.tau > 0 ? options.tau : n / 2;
  KsReport report;
  report.reps = options.reps;

  std::vector<double> values(static_cast<std::size_t>(options.reps), -1.0);
  parallel_chunks(options.reps, options.jobs, [&](int, int begin, int end) {
    for (int rep = begin; rep < end; ++rep) {
      try {
        Rng rng_model = Rng::stream(options.seed, {10, static_cast<std::uint64_t>(rep)});
        const ModelDraw draw = draw_model(family, rng_model);
        Eigen::VectorXd theta1 = draw.theta0;
        if (options.drift.size() > 0) {
          theta1 += options.drift / std::sqrt(static_cast<double>(n));
        } else if (options.fixed_delta.size() > 0) {
          theta1 += options.fixed_delta;
        }
        Rng rng_sim = Rng::stream(options.seed, {11, static_cast<std::uint64_t>(rep)});
        const ObservationSequence data = simulate(draw, draw.theta0, theta1, tau, n, rng_sim);

        detect::DetectConfig test;
        test.method = detect::Method::kDirect;
        test.alpha_l = 0.05;
        test.alpha_s = 0.0;
        test.tau_lo = tau;
        test.tau_hi = tau;
        test.fit_init = draw.theta0;
        test.jobs = 1;
        const detect::DetectionReport rep_out = detect::auto_test(*draw.program, data, test);
        if (!rep_out.skipped_taus.empty()) continue;
        values[static_cast<std::size_t>(rep)] = rep_out.r_lin;
      } catch (const Error&) {
        // counted below
      }
    }
  });

  std::vector<double> kept;
  kept.reserve(values.size());
  for (double v : values) {
    if (v >= 0.0) kept.push_back(v);
  }
  report.failures = options.reps - static_cast<int>(kept.size());
  if (kept.empty()) throw CalibrationError("all replicates failed in null_distribution_check");

  Rng probe = Rng::stream(options.seed, {12});
  const ModelDraw probe_draw = draw_model(family, probe);
  report.dof = probe_draw.program->dim();

  std::sort(kept.begin(), kept.end());
  const auto m = static_cast<int>(kept.size());
  double ks = 0.0;
  for (int i = 0; i < m; ++i) {
    const double f = calib::chi2_cdf(report.dof, kept[static_cast<std::size_t>(i)]);
    ks = std::max(ks, std::abs(f - static_cast<double>(i + 1) / m));
    ks = std::max(ks, std::abs(f - static_cast<double>(i) / m));
  }
  report.ks = ks;
  report.mean = std::accumulate(kept.begin(), kept.end(), 0.0) / m;
  report.mean_over_n = report.mean / n;
  if (options.drift.size() > 0 && options.i0.size() > 0) {
    const double lambda = static_cast<double>(tau) / n;
    report.noncentrality =
        lambda * (1.0 - lambda) * options.drift.dot(options.i0 * options.drift);
  }
  return report;
}

std::vector<BenchmarkCell> runtime_benchmark(const std::string& model_kind,
                                             const std::vector<int>& n_grid,
                                             const std::vector<int>& d_grid, int reps,
                                             std::uint64_t seed) {
  if (model_kind != "linear" && model_kind != "mlp") {
    throw ConfigError("benchmark model must be 'linear' or 'mlp'");
  }
  if (n_grid.empty() || d_grid.empty()) throw ConfigError("benchmark grids must be nonempty");
  if (reps < 1) throw ConfigError("benchmark needs reps >= 1");

  std::vector<BenchmarkCell> cells;
  for (int n : n_grid) {
    for (int dv : d_grid) {
      BenchmarkCell cell;
      cell.model = model_kind;
      cell.n = n;
      cell.reps = reps;
      std::vector<double> t_direct;
      std::vector<double> t_cg;
      double iters_sum = 0.0;
      double gap_max = 0.0;
      for (int rep = 0; rep < reps; ++rep) {
        Rng rng = Rng::stream(seed, {20, static_cast<std::uint64_t>(n),
                                     static_cast<std::uint64_t>(dv),
                                     static_cast<std::uint64_t>(rep)});
        std::unique_ptr<ModelProgram> program;
        Eigen::VectorXd theta;
        if (model_kind == "linear") {
          program = models::linear_model(dv);
          theta = Eigen::VectorXd::Zero(dv);
        } else {
          program = models::mlp_model(dv);
          theta = 0.5 * rng.normal_vector(models::mlp_dim(dv));
        }
        const int d = program->dim();
        cell.d = d;
        const ObservationSequence data = program->simulate(theta, theta, n, n, rng);
        const Eigen::VectorXd z = rng.normal_vector(d);

        const ad::Tape tape = program->record(data, 1, n);
        ad::Workspace ws(tape);
        ws.forward(theta);
        Eigen::VectorXd scratch(d);
        ws.gradient(tape.root(), scratch);  // prime the adjoint cache for both timers

        Eigen::VectorXd x_direct(d);
        {
          const auto t0 = std::chrono::steady_clock::now();
          Eigen::MatrixXd info(d, d);
          Eigen::VectorXd basis = Eigen::VectorXd::Zero(d);
          Eigen::VectorXd col(d);
          for (int j = 0; j < d; ++j) {
            basis[j] = 1.0;
            ws.set_tangent(basis, tape.root() + 1);
            ws.grad_tangent(tape.root(), col);
            info.col(j) = -col;
            basis[j] = 0.0;
          }
          info = ((info + info.transpose()) * 0.5).eval();
          const Eigen::LLT<Eigen::MatrixXd> llt(info);
          if (llt.info() != Eigen::Success) {
            throw ConditioningError("benchmark information is not positive definite", 0.0);
          }
          x_direct = llt.solve(z);
          t_direct.push_back(std::chrono::duration<double>(
                                 std::chrono::steady_clock::now() - t0)
                                 .count());
        }

        Eigen::VectorXd x_cg(d);
        {
          const auto t0 = std::chrono::steady_clock::now();
          detect::InformationOperator op(
              d, detect::InformationOperator::Kind::kSegment,
              [&](const Eigen::VectorXd& v) {
                Eigen::VectorXd out(d);
                ws.set_tangent(v, tape.root() + 1);
                ws.grad_tangent(tape.root(), out);
                return (-out).eval();
              });
          const detect::CgResult res = detect::cg_solve(op, z, 1e-7, 2 * d);
          x_cg = res.x;
          iters_sum += res.iterations;
          t_cg.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                             .count());
        }
        gap_max = std::max(gap_max, (x_direct - x_cg).norm() / std::max(1e-300, x_direct.norm()));
      }
      const auto mean_se = [](const std::vector<double>& t) {
        const double mean = std::accumulate(t.begin(), t.end(), 0.0) / t.size();
        double var = 0.0;
        for (double v : t) var += (v - mean) * (v - mean);
        var = t.size() > 1 ? var / (t.size() - 1) : 0.0;
        return std::make_pair(mean, std::sqrt(var / t.size()));
      };
      std::tie(cell.direct_mean_s, cell.direct_se_s) = mean_se(t_direct);
      std::tie(cell.cg_mean_s, cell.cg_se_s) = mean_se(t_cg);
      cell.cg_iterations_mean = iters_sum / reps;
      cell.method_rel_gap = gap_max;
      cells.push_back(cell);
    }
  }
  return cells;
}

std::string benchmark_to_csv(const std::vector<BenchmarkCell>& cells,
                             const std::string& config_hash) {
  std::ostringstream out;
  out << "config_hash,model,n,d,direct_mean_s,direct_se_s,cg_mean_s,cg_se_s,"
         "cg_iterations_mean,method_rel_gap,reps\n";
  out.precision(12);
  for (const auto& c : cells) {
    out << config_hash << "," << c.model << "," << c.n << "," << c.d << "," << c.direct_mean_s
        << "," << c.direct_se_s << "," << c.cg_mean_s << "," << c.cg_se_s << ","
        << c.cg_iterations_mean << "," << c.method_rel_gap << "," << c.reps << "\n";
  }
  return out.str();
}

nlohmann::json benchmark_to_json(const std::vector<BenchmarkCell>& cells,
                                 const std::string& config_hash) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& c : cells) {
    rows.push_back({{"model", c.model},
                    {"n", c.n},
                    {"d", c.d},
                    {"direct_mean_s", c.direct_mean_s},
                    {"direct_se_s", c.direct_se_s},
                    {"cg_mean_s", c.cg_mean_s},
                    {"cg_se_s", c.cg_se_s},
                    {"cg_iterations_mean", c.cg_iterations_mean},
                    {"method_rel_gap", c.method_rel_gap},
                    {"reps", c.reps}});
  }
  return {{"config_hash", config_hash}, {"rows", rows}};
}

HeterogeneityReport arma_heterogeneity_study(int r, int q, int n, int reps, std::uint64_t seed,
                                             const detect::DetectConfig& base, int jobs) {
  HeterogeneityReport report;
  report.r = r;
  report.q = q;
  report.n = n;
  report.reps = reps;

  ScenarioModel family;
  family.kind = "arma";
  family.r = r;
  family.q = q;
  family.sigma = 0.1;

  struct RepResult {
    bool failed{true};
    int lin_u{0}, scan_u{0}, auto_u{0};
    int lin_r{0}, scan_r{0}, auto_r{0};
    double condition{0.0};
    bool scan_is_ar{false};
    bool has_scan_pick{false};
  };
  std::vector<RepResult> results(static_cast<std::size_t>(reps));

  std::vector<int> ar_components(static_cast<std::size_t>(r));
  std::iota(ar_components.begin(), ar_components.end(), 0);

  parallel_chunks(reps, jobs, [&](int, int begin, int end) {
    for (int rep = begin; rep < end; ++rep) {
      RepResult& out = results[static_cast<std::size_t>(rep)];
      try {
        Rng rng_model = Rng::stream(seed, {30, static_cast<std::uint64_t>(rep)});
        const ModelDraw draw = draw_model(family, rng_model);
        Rng rng_sim = Rng::stream(seed, {31, static_cast<std::uint64_t>(rep)});
        const ObservationSequence data = simulate(draw, draw.theta0, draw.theta0, n, n, rng_sim);

        FitOptions fopt;
        fopt.tol = base.fit_tol;
        fopt.max_iter = base.fit_max_iter;
        const FitResult fit = fit_mle(*draw.program, data, draw.theta0, fopt);

        detect::DetectConfig unrestricted = base;
        unrestricted.theta_hat = fit.theta;
        unrestricted.jobs = 1;
        const detect::DetectionReport rep_u =
            detect::auto_test(*draw.program, data, unrestricted);

        const detect::DetectConfig restricted =
            detect::restrict_components(unrestricted, ar_components);
        const detect::DetectionReport rep_r = detect::auto_test(*draw.program, data, restricted);

        const Eigen::MatrixXd schur =
            detect::partial_information_dense(*draw.program, fit.theta, data, n / 2);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(schur);
        const double lo = std::abs(eig.eigenvalues().minCoeff());
        const double hi = std::abs(eig.eigenvalues().maxCoeff());
        out.condition = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();

        out.lin_u = rep_u.psi_lin;
        out.scan_u = rep_u.psi_scan;
        out.auto_u = rep_u.psi_auto;
        out.lin_r = rep_r.psi_lin;
        out.scan_r = rep_r.psi_scan;
        out.auto_r = rep_r.psi_auto;
        if (!rep_u.scan_subset.empty()) {
          out.has_scan_pick = true;
          out.scan_is_ar = true;
          for (int c : rep_u.scan_subset) out.scan_is_ar &= c < r;
        }
        out.failed = false;
      } catch (const Error&) {
        out.failed = true;
      }
    }
  });

  int done = 0;
  int picks = 0;
  int ar_picks = 0;
  std::vector<double> conditions;
  for (const auto& res : results) {
    if (res.failed) {
      ++report.failures;
      continue;
    }
    ++done;
    report.fa_lin_unrestricted += res.lin_u;
    report.fa_scan_unrestricted += res.scan_u;
    report.fa_auto_unrestricted += res.auto_u;
    report.fa_lin_restricted += res.lin_r;
    report.fa_scan_restricted += res.scan_r;
    report.fa_auto_restricted += res.auto_r;
    conditions.push_back(res.condition);
    if (res.has_scan_pick) {
      ++picks;
      ar_picks += res.scan_is_ar ? 1 : 0;
    }
  }
  if (done == 0) throw CalibrationError("all repetitions failed in arma_heterogeneity_study");
  report.fa_lin_unrestricted /= done;
  report.fa_scan_unrestricted /= done;
  report.fa_auto_unrestricted /= done;
  report.fa_lin_restricted /= done;
  report.fa_scan_restricted /= done;
  report.fa_auto_restricted /= done;
  std::sort(conditions.begin(), conditions.end());
  report.median_condition = conditions[conditions.size() / 2];
  report.scan_ar_selection_rate = picks > 0 ? static_cast<double>(ar_picks) / picks : 0.0;
  return report;
}

}  // namespace scorewatch::harness
