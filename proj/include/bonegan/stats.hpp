#pragma once

// Studentized range distribution and the Tukey-Kramer honest significant
// difference test for a one-way layout.

#include <boost/math/quadrature/gauss.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "bonegan/error.hpp"

namespace bonegan::stats {

namespace detail {

using Gauss = boost::math::quadrature::gauss<double, 20>;

template <class F>
double composite(F&& f, double a, double b, int panels) {
  const double h = (b - a) / panels;
  double s = 0.0;
  for (int i = 0; i < panels; ++i) s += Gauss::integrate(f, a + i * h, a + (i + 1) * h);
  return s;
}

inline double phi(double z) { return 0.3989422804014327 * std::exp(-0.5 * z * z); }
inline double Phi(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// P(range of k iid standard normals < w).
inline double range_cdf(double w, int k) {
  if (w <= 0.0) return 0.0;
  auto f = [&](double z) {
    const double d = Phi(z) - Phi(z - w);
    return d <= 0.0 ? 0.0 : phi(z) * std::pow(d, k - 1);
  };
  // The integrand lives where phi(z) is non-negligible and z - w is not far below -8.
  return std::min(1.0, k * composite(f, -8.5, 8.5 + w, 24));
}

// log density of s = sqrt(chi2_nu / nu).
inline double log_scale_density(double s, double nu) {
  return 0.5 * nu * std::log(nu) - std::lgamma(0.5 * nu) - (0.5 * nu - 1.0) * std::log(2.0) +
         (nu - 1.0) * std::log(s) - 0.5 * nu * s * s;
}

}  // namespace detail

// CDF of the studentized range with k groups and nu error degrees of freedom.
// nu = infinity (or very large) reduces to the range of standard normals.
inline double ptukey(double q, int k, double nu) {
  if (k < 2) throw InvalidInput("studentized range needs k >= 2");
  if (!(nu > 0.0)) throw InvalidInput("degrees of freedom must be > 0");
  if (std::isnan(q)) throw InvalidInput("q must not be NaN");
  if (q <= 0.0) return 0.0;
  if (std::isinf(q)) return 1.0;
  if (std::isinf(nu) || nu > 1e7) return detail::range_cdf(q, k);

  double lo = 0.0, hi = 10.0;
  if (nu > 50.0) {
    const double sd = 1.0 / std::sqrt(2.0 * nu);
    lo = std::max(0.0, 1.0 - 15.0 * sd);
    hi = 1.0 + 15.0 * sd;
  }
  auto f = [&](double s) {
    if (s <= 0.0) return 0.0;
    return std::exp(detail::log_scale_density(s, nu)) * detail::range_cdf(q * s, k);
  };
  return std::clamp(detail::composite(f, lo, hi, 40), 0.0, 1.0);
}

inline double ptukey_sf(double q, int k, double nu) { return 1.0 - ptukey(q, k, nu); }

struct PairResult {
  std::size_t i = 0, j = 0;
  double mean_diff = 0;  // mean_i - mean_j
  double q = 0;
  double p = 1;
  bool significant = false;
};

struct HsdResult {
  std::vector<double> means;
  std::vector<std::size_t> counts;
  double mse = 0;
  double df = 0;
  double alpha = 0.05;
  std::vector<PairResult> pairs;

  const PairResult& pair(std::size_t a, std::size_t b) const {
    for (const auto& p : pairs)
      if ((p.i == a && p.j == b) || (p.i == b && p.j == a)) return p;
    throw InvalidInput("no such group pair");
  }
  double p_value(std::size_t a, std::size_t b) const { return a == b ? 1.0 : pair(a, b).p; }
};

// Tukey-Kramer HSD across all groups as one family.
inline HsdResult tukey_hsd(const std::vector<std::vector<double>>& groups, double alpha = 0.05) {
  if (groups.size() < 2) throw InvalidInput("Tukey test needs at least two groups");
  if (!(alpha > 0.0 && alpha < 1.0)) throw InvalidInput("alpha must lie in (0,1)");
  HsdResult r;
  r.alpha = alpha;
  double ss = 0.0;
  std::size_t total = 0;
  for (const auto& g : groups) {
    if (g.size() < 2) throw InvalidInput("every group needs at least two samples");
    for (double x : g)
      if (!std::isfinite(x)) throw InvalidInput("non-finite sample value");
    const double m = std::accumulate(g.begin(), g.end(), 0.0) / static_cast<double>(g.size());
    for (double x : g) ss += (x - m) * (x - m);
    r.means.push_back(m);
    r.counts.push_back(g.size());
    total += g.size();
  }
  const auto k = groups.size();
  r.df = static_cast<double>(total - k);
  r.mse = ss / r.df;
  if (!(r.mse > 0.0))
    throw UndefinedStatistic("zero within-group variance in every group; Tukey test is undefined");
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) {
      PairResult p;
      p.i = i;
      p.j = j;
      p.mean_diff = r.means[i] - r.means[j];
      const double se = std::sqrt(0.5 * r.mse * (1.0 / r.counts[i] + 1.0 / r.counts[j]));
      p.q = std::abs(p.mean_diff) / se;
      p.p = ptukey_sf(p.q, static_cast<int>(k), r.df);
      p.significant = p.p < alpha;
      r.pairs.push_back(p);
    }
  return r;
}

}  // namespace bonegan::stats
