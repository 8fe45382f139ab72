#pragma once

// Limited-memory BFGS with a strong-Wolfe line search (bracketing + zoom with
// cubic interpolation). Tracks the best point ever evaluated and refuses to
// step onto non-finite objective values.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "bonegan/error.hpp"

namespace bonegan::lbfgs {

using Vector = Eigen::VectorXd;
// Returns f(x) and writes the gradient into g.
using Objective = std::function<double(const Vector& x, Vector& g)>;

struct Iteration;
using IterationCallback = std::function<void(const Iteration&, const Vector& x)>;

struct Options {
  int history = 10;
  int max_iterations = 500;
  double grad_tolerance = 1e-6;    // infinity norm
  double change_tolerance = 1e-10;  // relative decrease over `change_window` iterations
  int change_window = 10;
  int max_line_search = 25;
  double c1 = 1e-4;
  double c2 = 0.9;

  void validate() const {
    if (history < 1) throw InvalidInput("L-BFGS history must be >= 1");
    if (max_iterations < 0) throw InvalidInput("max_iterations must be >= 0");
    if (!(grad_tolerance >= 0.0) || !(change_tolerance >= 0.0)) throw InvalidInput("tolerances must be >= 0");
    if (change_window < 1 || max_line_search < 1) throw InvalidInput("window and line-search budget must be >= 1");
    if (!(0.0 < c1 && c1 < c2 && c2 < 1.0)) throw InvalidInput("need 0 < c1 < c2 < 1");
  }
};

enum class Status { gradient_converged, change_converged, max_iterations, line_search_failed, non_finite };

inline const char* to_string(Status s) {
  switch (s) {
    case Status::gradient_converged: return "gradient_converged";
    case Status::change_converged: return "change_converged";
    case Status::max_iterations: return "max_iterations";
    case Status::line_search_failed: return "line_search_failed";
    case Status::non_finite: return "non_finite";
  }
  return "?";
}

struct Iteration {
  int iteration = 0;
  double f = 0;
  double grad_inf = 0;
  double step = 0;
  int evaluations = 0;
};

struct Result {
  Vector x;  // best point seen
  double f = std::numeric_limits<double>::infinity();
  Status status = Status::max_iterations;
  std::vector<Iteration> trace;  // trace[0] is the starting point
  int evaluations = 0;
  int rejected_evaluations = 0;  // non-finite objective values met in line searches

  bool converged() const { return status == Status::gradient_converged || status == Status::change_converged; }
};

namespace detail {

// Minimizer of the cubic interpolating (a, fa, ga) and (b, fb, gb),
// safeguarded to the interior of [a, b].
inline double cubic_min(double a, double fa, double ga, double b, double fb, double gb) {
  const double lo = std::min(a, b), hi = std::max(a, b);
  const double d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
  const double disc = d1 * d1 - ga * gb;
  double t = std::numeric_limits<double>::quiet_NaN();
  if (disc >= 0.0) {
    const double d2 = std::copysign(std::sqrt(disc), b - a);
    t = b - (b - a) * (gb + d2 - d1) / (gb - ga + 2.0 * d2);
  }
  const double margin = 0.1 * (hi - lo);
  if (!std::isfinite(t) || t < lo + margin || t > hi - margin) t = 0.5 * (lo + hi);
  return t;
}

}  // namespace detail

inline Result minimize(const Objective& fn, const Vector& x0, const Options& opts = {},
                       const IterationCallback& on_iteration = {}) {
  opts.validate();
  Result res;
  Vector x = x0, g(x0.size());
  double f = fn(x, g);
  ++res.evaluations;
  if (!std::isfinite(f) || !g.allFinite()) throw InvalidInput("objective is not finite at the starting point");
  res.x = x;
  res.f = f;
  res.trace.push_back({0, f, g.lpNorm<Eigen::Infinity>(), 0.0, 1});
  if (on_iteration) on_iteration(res.trace.back(), x);

  auto remember = [&](const Vector& xp, double fp) {
    if (fp < res.f) {
      res.f = fp;
      res.x = xp;
    }
  };

  std::deque<Vector> S, Y;
  std::deque<double> rho;
  std::vector<double> history_f{f};

  for (int it = 1;; ++it) {
    if (g.lpNorm<Eigen::Infinity>() < opts.grad_tolerance) {
      res.status = Status::gradient_converged;
      break;
    }
    if (it > opts.max_iterations) {
      res.status = Status::max_iterations;
      break;
    }

    // Two-loop recursion.
    Vector q = g;
    std::vector<double> alpha(S.size());
    for (int i = static_cast<int>(S.size()) - 1; i >= 0; --i) {
      alpha[i] = rho[i] * S[i].dot(q);
      q -= alpha[i] * Y[i];
    }
    double gamma = S.empty() ? 1.0 / std::max(1.0, g.norm()) : S.back().dot(Y.back()) / Y.back().squaredNorm();
    Vector d = gamma * q;
    for (std::size_t i = 0; i < S.size(); ++i) d += S[i] * (alpha[i] - rho[i] * Y[i].dot(d));
    d = -d;
    double dg0 = d.dot(g);
    if (!(dg0 < 0.0)) {  // not a descent direction: restart from steepest descent
      S.clear();
      Y.clear();
      rho.clear();
      d = -g / std::max(1.0, g.norm());
      dg0 = d.dot(g);
    }

    // Strong-Wolfe line search.
    const double f0 = f;
    Vector g_new(x.size()), x_new(x.size());
    int evals = 0;
    auto phi = [&](double a, double& dphi) {
      x_new = x + a * d;
      const double v = fn(x_new, g_new);
      ++evals;
      ++res.evaluations;
      if (!std::isfinite(v) || !g_new.allFinite()) {
        ++res.rejected_evaluations;
        return std::numeric_limits<double>::quiet_NaN();
      }
      remember(x_new, v);
      dphi = g_new.dot(d);
      return v;
    };

    double a_prev = 0.0, f_prev = f0, d_prev = dg0;
    double a = 1.0, accepted = -1.0, f_acc = f0;
    Vector g_acc;
    bool hit_non_finite = false;
    auto zoom = [&](double lo, double f_lo, double d_lo, double hi, double f_hi, double d_hi) {
      while (evals < opts.max_line_search) {
        const double aj = detail::cubic_min(lo, f_lo, d_lo, hi, f_hi, d_hi);
        double dj = 0;
        const double fj = phi(aj, dj);
        if (std::isnan(fj)) {
          hit_non_finite = true;
          hi = aj;
          f_hi = std::numeric_limits<double>::infinity();
          d_hi = 0;
          continue;
        }
        if (fj > f0 + opts.c1 * aj * dg0 || fj >= f_lo) {
          hi = aj;
          f_hi = fj;
          d_hi = dj;
        } else {
          if (std::abs(dj) <= -opts.c2 * dg0) {
            accepted = aj;
            f_acc = fj;
            g_acc = g_new;
            return;
          }
          if (dj * (hi - lo) >= 0) {
            hi = lo;
            f_hi = f_lo;
            d_hi = d_lo;
          }
          lo = aj;
          f_lo = fj;
          d_lo = dj;
        }
        if (std::abs(hi - lo) < 1e-16 * std::max(1.0, std::abs(lo))) break;
      }
      // Budget exhausted: accept the best sufficient-decrease point found.
      if (lo > 0.0 && f_lo < f0) {
        accepted = lo;
        x_new = x + lo * d;
        f_acc = fn(x_new, g_new);
        ++res.evaluations;
        g_acc = g_new;
      }
    };

    while (evals < opts.max_line_search) {
      double da = 0;
      const double fa = phi(a, da);
      if (std::isnan(fa)) {  // reject and shrink toward the last good point
        hit_non_finite = true;
        a = a_prev + 0.5 * (a - a_prev);
        continue;
      }
      if (fa > f0 + opts.c1 * a * dg0 || (a_prev > 0.0 && fa >= f_prev)) {
        zoom(a_prev, f_prev, d_prev, a, fa, da);
        break;
      }
      if (std::abs(da) <= -opts.c2 * dg0) {
        accepted = a;
        f_acc = fa;
        g_acc = g_new;
        break;
      }
      if (da >= 0) {
        zoom(a, fa, da, a_prev, f_prev, d_prev);
        break;
      }
      a_prev = a;
      f_prev = fa;
      d_prev = da;
      a *= 2.0;
    }

    if (accepted <= 0.0) {
      res.status = hit_non_finite ? Status::non_finite : Status::line_search_failed;
      break;
    }

    const Vector s = accepted * d;
    const Vector y = g_acc - g;
    x += s;
    f = f_acc;
    g = g_acc;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      S.push_back(s);
      Y.push_back(y);
      rho.push_back(1.0 / sy);
      if (static_cast<int>(S.size()) > opts.history) {
        S.pop_front();
        Y.pop_front();
        rho.pop_front();
      }
    }
    res.trace.push_back({it, f, g.lpNorm<Eigen::Infinity>(), accepted, evals});
    if (on_iteration) on_iteration(res.trace.back(), x);
    history_f.push_back(f);

    if (static_cast<int>(history_f.size()) > opts.change_window) {
      const double old = history_f[history_f.size() - 1 - static_cast<std::size_t>(opts.change_window)];
      if ((old - f) <= opts.change_tolerance * std::max(std::abs(old), 1e-300)) {
        res.status = Status::change_converged;
        break;
      }
    }
  }
  return res;
}

}  // namespace bonegan::lbfgs
