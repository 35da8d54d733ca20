#include "scorewatch/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "scorewatch/errors.hpp"
#include "scorewatch/rng.hpp"

namespace scorewatch::calib {

namespace {

constexpr int kMaxSeriesIter = 500;
constexpr double kEps = std::numeric_limits<double>::epsilon();

// Lower regularized gamma by power series, for x < a + 1.
double gamma_p_series(double a, double x) {
  double term = 1.0 / a;
  double sum = term;
  double ap = a;
  for (int i = 0; i < kMaxSeriesIter; ++i) {
    ap += 1.0;
    term *= x / ap;
    sum += term;
    if (std::abs(term) < std::abs(sum) * kEps) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// log of the continued fraction for Q(a, x), x > a + 1 (modified Lentz).
double log_gamma_q_cf(double a, double x) {
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= kMaxSeriesIter; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) break;
  }
  return -x + a * std::log(x) - std::lgamma(a) + std::log(h);
}

}  // namespace

double gamma_p(double a, double x) {
  if (!(a > 0.0)) throw DomainError("gamma_p requires a > 0");
  if (x <= 0.0) return 0.0;
  if (x < a + 1.0) return gamma_p_series(a, x);
  return 1.0 - std::exp(log_gamma_q_cf(a, x));
}

double gamma_q(double a, double x) {
  if (!(a > 0.0)) throw DomainError("gamma_q requires a > 0");
  if (x <= 0.0) return 1.0;
  if (x < a + 1.0) return 1.0 - gamma_p_series(a, x);
  return std::exp(log_gamma_q_cf(a, x));
}

double log_gamma_q(double a, double x) {
  if (!(a > 0.0)) throw DomainError("log_gamma_q requires a > 0");
  if (x <= 0.0) return 0.0;
  if (x < a + 1.0) return std::log1p(-gamma_p_series(a, x));
  return log_gamma_q_cf(a, x);
}

double chi2_cdf(int dof, double x) {
  if (dof < 1) throw DomainError("chi2 dof must be >= 1");
  return gamma_p(0.5 * dof, 0.5 * x);
}

double chi2_survival(int dof, double x) {
  if (dof < 1) throw DomainError("chi2 dof must be >= 1");
  return gamma_q(0.5 * dof, 0.5 * x);
}

double chi2_quantile(int dof, double upper_prob) {
  if (dof < 1) throw DomainError("chi2 dof must be >= 1");
  if (!(upper_prob > 0.0 && upper_prob < 1.0)) {
    throw DomainError("chi2_quantile requires upper_prob in (0, 1)");
  }
  const double a = 0.5 * dof;
  const double log_p = std::log(upper_prob);

  // Wilson-Hilferty start, floored at a small positive value.
  double x;
  {
    const double z = -inverse_normal_cdf(upper_prob);  // upper normal quantile
    const double f = 2.0 / (9.0 * dof);
    const double cube = 1.0 - f + z * std::sqrt(f);
    x = cube > 0.0 ? dof * cube * cube * cube : 0.5 * dof;
    x = std::max(x, 1e-8);
  }

  // Bracket [lo, hi] with survival(lo) >= p >= survival(hi).
  double lo = 0.0;
  double hi = x;
  while (log_gamma_q(a, 0.5 * hi) > log_p) {
    lo = hi;
    hi *= 2.0;
    if (hi > 1e12) throw CalibrationError("chi2_quantile bracket expansion failed");
  }

  // Newton on g(x) = log Q(a, x/2) - log p, with bisection safeguard.
  for (int it = 0; it < 200; ++it) {
    const double lq = log_gamma_q(a, 0.5 * x);
    const double g = lq - log_p;
    if (g > 0.0) {
      lo = x;
    } else {
      hi = x;
    }
    // d/dx log Q = -density/Q with chi2 log-density at x.
    const double log_dens = (a - 1.0) * std::log(0.5 * x) - 0.5 * x - std::lgamma(a) -
                            std::log(2.0);
    const double step = g * std::exp(lq - log_dens);
    double x_new = x + step;
    if (!(x_new > lo && x_new < hi)) x_new = 0.5 * (lo + hi);
    if (std::abs(x_new - x) <= 1e-14 * std::max(1.0, x)) {
      x = x_new;
      break;
    }
    x = x_new;
  }
  return x;
}

double linear_threshold(int d, int n, double alpha_l) {
  if (d < 1 || n < 1) throw DomainError("linear_threshold requires d, n >= 1");
  if (alpha_l < 0.0 || alpha_l >= 1.0) throw DomainError("alpha_l must be in [0, 1)");
  if (alpha_l == 0.0) return std::numeric_limits<double>::infinity();
  const double level = alpha_l / n;
  if (level <= 0.0 || level < 1e-300) {
    throw CalibrationError("per-tau level alpha_l/n underflows");
  }
  return chi2_quantile(d, level);
}

std::vector<double> scan_thresholds(int d, int n, int max_cardinality, double alpha_s) {
  if (max_cardinality < 1 || max_cardinality > d) {
    throw DomainError("scan max cardinality must be in [1, d]");
  }
  if (alpha_s < 0.0 || alpha_s >= 1.0) throw DomainError("alpha_s must be in [0, 1)");
  std::vector<double> out(static_cast<std::size_t>(max_cardinality));
  if (alpha_s == 0.0) {
    std::fill(out.begin(), out.end(), std::numeric_limits<double>::infinity());
    return out;
  }
  for (int p = 1; p <= max_cardinality; ++p) {
    const double log_binom =
        std::lgamma(d + 1.0) - std::lgamma(p + 1.0) - std::lgamma(d - p + 1.0);
    const double log_level =
        std::log(alpha_s) - log_binom - std::log(static_cast<double>(n)) - 2.0 * std::log(p + 1.0);
    if (log_level < std::log(1e-300)) {
      throw CalibrationError("scan per-test level underflows; use a smaller max cardinality");
    }
    out[static_cast<std::size_t>(p - 1)] = chi2_quantile(p, std::exp(log_level));
  }
  return out;
}

ThresholdSet ThresholdSet::bonferroni(int d, int n, int max_cardinality, double alpha_l,
                                      double alpha_s) {
  ThresholdSet set;
  set.d = d;
  set.n = n;
  set.max_cardinality = max_cardinality;
  set.alpha_l = alpha_l;
  set.alpha_s = alpha_s;
  set.h_lin = linear_threshold(d, n, alpha_l);
  set.h_p = scan_thresholds(d, n, max_cardinality, alpha_s);
  double correction = 0.0;
  for (int p = 1; p <= max_cardinality; ++p) {
    correction += 1.0 / ((p + 1.0) * (p + 1.0));
    if (p >= 2 && !(set.h_p[static_cast<std::size_t>(p - 1)] >=
                    set.h_p[static_cast<std::size_t>(p - 2)])) {
      throw CalibrationError("scan thresholds are not increasing in p");
    }
  }
  if (!(correction < 1.0)) {
    throw CalibrationError("scan correction sum exceeds 1");
  }
  return set;
}

double empirical_upper_quantile(std::vector<double> values, double alpha) {
  if (values.empty()) throw CalibrationError("empty sample for empirical quantile");
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("alpha must be in (0, 1)");
  std::sort(values.begin(), values.end());
  const auto b = static_cast<double>(values.size());
  auto k = static_cast<std::size_t>(std::ceil((1.0 - alpha) * b));
  k = std::min(std::max<std::size_t>(k, 1), values.size());
  return values[k - 1];
}

}  // namespace scorewatch::calib
