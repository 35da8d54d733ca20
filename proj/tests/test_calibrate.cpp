#include <cmath>

#include "../vendor/doctest.h"
#include "oracles.hpp"
#include "scorewatch/calibrate.hpp"

using namespace scorewatch;
using namespace scorewatch::calib;

TEST_CASE("chi2 quantile at dof=1, upper 0.05 matches the quadrature oracle") {
  // High-precision reference by integrating the density over [q, large].
  const double q = chi2_quantile(1, 0.05);
  REQUIRE(q == doctest::Approx(3.841459).epsilon(1e-6));
  const double tail =
      oracles::integrate([](double x) { return oracles::chi2_density(1, x); }, q, 200.0, 1e-13);
  REQUIRE(tail == doctest::Approx(0.05).epsilon(1e-8));
}

TEST_CASE("chi2 with two degrees of freedom is exponential") {
  // Survival of chi2_2 is exp(-x/2), so the upper-e^{-x/2} quantile is x.
  for (double x : {0.5, 1.0, 3.0, 10.0, 40.0}) {
    REQUIRE(chi2_quantile(2, std::exp(-0.5 * x)) == doctest::Approx(x).epsilon(1e-10));
  }
}

TEST_CASE("chi2 quantile/survival round trip to 1e-10 across dof") {
  for (int dof : {1, 2, 3, 5, 10, 25, 50, 100, 150, 200}) {
    for (double p : {0.9, 0.5, 0.1, 1e-3, 1e-8, 1e-15, 1e-30}) {
      const double q = chi2_quantile(dof, p);
      const double back = chi2_survival(dof, q);
      REQUIRE(back == doctest::Approx(p).epsilon(1e-10));
    }
  }
}

TEST_CASE("chi2 cdf matches quadrature at moderate points") {
  for (int dof : {2, 3, 7}) {
    for (double x : {0.5, 2.0, 6.5}) {
      const double ref = oracles::integrate(
          [dof](double t) { return oracles::chi2_density(dof, t); }, 1e-12, x, 1e-13);
      REQUIRE(chi2_cdf(dof, x) == doctest::Approx(ref).epsilon(1e-9));
    }
  }
  // dof = 1 has an integrable singularity at 0; substitute x = u^2 so the
  // integrand is the (doubled) standard normal density.
  for (double x : {0.5, 2.0, 6.5}) {
    const double ref = oracles::integrate(
        [](double u) { return 2.0 * std::exp(-0.5 * u * u) / std::sqrt(2.0 * M_PI); }, 0.0,
        std::sqrt(x), 1e-13);
    REQUIRE(chi2_cdf(1, x) == doctest::Approx(ref).epsilon(1e-9));
  }
}

TEST_CASE("linear threshold") {
  const double h = linear_threshold(3, 500, 0.025);
  REQUIRE(h == doctest::Approx(chi2_quantile(3, 0.025 / 500)).epsilon(1e-12));
  REQUIRE(std::isinf(linear_threshold(3, 500, 0.0)));
  // Growth check: H_lin(alpha)/n must vanish as n grows.
  double prev_ratio = 1e300;
  for (int n : {1000, 1000000, 1000000000}) {
    const double ratio = linear_threshold(5, n, 0.05) / n;
    REQUIRE(ratio < prev_ratio);
    prev_ratio = ratio;
  }
  REQUIRE(prev_ratio < 1e-6);
}

TEST_CASE("scan thresholds: d=P=1 collapses to the quarter level") {
  const auto h = scan_thresholds(1, 100, 1, 0.05);
  REQUIRE(h.size() == 1);
  REQUIRE(h[0] == doctest::Approx(chi2_quantile(1, 0.05 / 400)).epsilon(1e-12));
}

TEST_CASE("scan thresholds at the paper's configuration are finite and increasing") {
  const auto h = scan_thresholds(101, 1000, 10, 0.025);
  REQUIRE(h.size() == 10);
  for (std::size_t p = 0; p < h.size(); ++p) {
    REQUIRE(std::isfinite(h[p]));
    if (p > 0) REQUIRE(h[p] > h[p - 1]);
  }
}

TEST_CASE("scan thresholds stay underflow-safe at large d") {
  const auto h = scan_thresholds(10000, 1000, 3, 0.025);
  for (double v : h) REQUIRE(std::isfinite(v));
}

TEST_CASE("union bound of the scan construction stays below alpha") {
  const int d = 8;
  const int n = 50;
  const int max_card = 2;
  const double alpha = 0.04;
  const auto h = scan_thresholds(d, n, max_card, alpha);
  double total = 0.0;
  for (int p = 1; p <= max_card; ++p) {
    const double level = chi2_survival(p, h[static_cast<std::size_t>(p - 1)]);
    double binom = 1.0;
    for (int i = 0; i < p; ++i) binom = binom * (d - i) / (i + 1);
    total += binom * n * level;
  }
  REQUIRE(total < alpha);
}

TEST_CASE("threshold set invariants") {
  const auto set = ThresholdSet::bonferroni(21, 400, 4, 0.025, 0.025);
  REQUIRE(set.h_p.size() == 4);
  double corr = 0.0;
  for (int p = 1; p <= 4; ++p) corr += 1.0 / ((p + 1.0) * (p + 1.0));
  REQUIRE(corr < 1.0);
  REQUIRE(std::isfinite(set.h_lin));
}

TEST_CASE("empirical quantile of a constant sample is that constant") {
  std::vector<double> values(200, 7.25);
  REQUIRE(empirical_upper_quantile(values, 0.05) == 7.25);
}

TEST_CASE("empirical quantile order statistic convention") {
  std::vector<double> values;
  for (int i = 1; i <= 100; ++i) values.push_back(i);
  // ceil(0.95 * 100) = 95th order statistic.
  REQUIRE(empirical_upper_quantile(values, 0.05) == 95.0);
}
