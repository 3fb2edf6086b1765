#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "filterstab/core.hpp"
#include "filterstab/measures.hpp"
#include "filterstab/parallel.hpp"
#include "filterstab/sinkhorn.hpp"

namespace filterstab::metrics {

/// e_n: |mean(m) - x_true|_2 / sqrt(d).
inline double scaled_l2_error(const EmpiricalMeasure& m, const StateVector& x_true) {
  require(m.dim() == x_true.size(), ErrorKind::validation, "state dimension mismatch");
  return (measure_mean(m) - x_true).norm() / std::sqrt(static_cast<double>(x_true.size()));
}

/// s_n: sqrt(trace(sample covariance) / d).
inline double ensemble_spread(const EmpiricalMeasure& m) {
  return std::sqrt(measure_covariance_trace(m) / static_cast<double>(m.dim()));
}

inline std::vector<double> mean_over_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  std::vector<double> mean(rows.front().size(), 0.0);
  for (const auto& r : rows) {
    require(r.size() == mean.size(), ErrorKind::validation, "ragged series");
    for (std::size_t k = 0; k < r.size(); ++k) mean[k] += r[k];
  }
  for (auto& v : mean) v /= static_cast<double>(rows.size());
  return mean;
}

struct DivergenceSeries {
  std::vector<double> times;
  std::vector<std::vector<double>> per_realization;  // [realization][step]
  std::vector<double> mean;
  int negative_flags = 0;  // evaluations where raw S_eps < -1e-6
};

using MeasureRun = std::vector<EmpiricalMeasure>;

/// D_eps between corresponding measures of two runs, per realization and step.
inline DivergenceSeries divergence_series(const std::vector<MeasureRun>& run_a, const std::vector<MeasureRun>& run_b,
                                          const sinkhorn::SinkhornConfig& scfg, double g, int jobs = 1) {
  require(run_a.size() == run_b.size() && !run_a.empty(), ErrorKind::validation,
          "runs must have the same nonzero number of realizations");
  const std::size_t steps = run_a.front().size();
  for (std::size_t r = 0; r < run_a.size(); ++r)
    require(run_a[r].size() == steps && run_b[r].size() == steps, ErrorKind::validation, "run lengths differ");

  DivergenceSeries out;
  out.times.resize(steps);
  for (std::size_t k = 0; k < steps; ++k) out.times[k] = static_cast<double>(k) * g;
  out.per_realization.assign(run_a.size(), std::vector<double>(steps, 0.0));
  std::vector<int> flags(run_a.size() * steps, 0);

  parallel_for(run_a.size() * steps, jobs, [&](std::size_t idx) {
    const std::size_t r = idx / steps, k = idx % steps;
    try {
      const auto rep = sinkhorn::sinkhorn_divergence_report(run_a[r][k], run_b[r][k], scfg);
      out.per_realization[r][k] = std::sqrt(std::max(rep.s_eps, 0.0));
      flags[idx] = rep.suspicious_negative() ? 1 : 0;
    } catch (const NonConvergenceError& e) {
      throw NonConvergenceError(std::string(e.what()) + " [realization " + std::to_string(r) + ", step " +
                                    std::to_string(k) + "]",
                                e.last_relative_error());
    }
  });
  for (int f : flags) out.negative_flags += f;
  out.mean = mean_over_rows(out.per_realization);
  return out;
}

struct ErrorSeries {
  std::vector<std::vector<double>> e2;  // [realization][step]
  std::vector<std::vector<double>> s2;
  std::vector<double> e2_mean;
  std::vector<double> s2_mean;
  std::vector<double> rmse;  // sqrt(mean e2)

  void finalize() {
    e2_mean = mean_over_rows(e2);
    s2_mean = mean_over_rows(s2);
    rmse.resize(e2_mean.size());
    for (std::size_t k = 0; k < rmse.size(); ++k) rmse[k] = std::sqrt(e2_mean[k]);
  }
};

/// e_n^2 and s_n^2 of each run against the truth states.
inline ErrorSeries error_series(const std::vector<MeasureRun>& runs, const std::vector<StateVector>& truth) {
  ErrorSeries out;
  for (const auto& run : runs) {
    require(run.size() <= truth.size(), ErrorKind::validation, "run longer than truth trajectory");
    std::vector<double> e2(run.size()), s2(run.size());
    for (std::size_t k = 0; k < run.size(); ++k) {
      const double e = scaled_l2_error(run[k], truth[k]);
      const double s = ensemble_spread(run[k]);
      e2[k] = e * e;
      s2[k] = s * s;
    }
    out.e2.push_back(std::move(e2));
    out.s2.push_back(std::move(s2));
  }
  out.finalize();
  return out;
}

// ---------------------------------------------------------------------------
// Exponential decay fit  v(t) = a exp(-lambda t) + c

struct FitResult {
  double a = 0.0, lambda = 0.0, c = 0.0;
  double ci_a = 0.0, ci_lambda = 0.0, ci_c = 0.0;  // 95% half-widths
  double r2 = 0.0;
  bool ok = false;
  int iterations = 0;
  std::string message;
};

struct FitOptions {
  double start_time = -std::numeric_limits<double>::infinity();  // points with t < start_time are excluded
  int max_iter = 2000;
};

inline double exp_model(double t, const std::array<double, 3>& p) { return p[0] * std::exp(-p[1] * t) + p[2]; }

/// d/d(a, lambda, c) of the model at t.
inline std::array<double, 3> exp_model_jacobian(double t, const std::array<double, 3>& p) {
  const double e = std::exp(-p[1] * t);
  return {e, -p[0] * t * e, 1.0};
}

namespace detail {

struct Normal {
  Eigen::Matrix3d JtJ = Eigen::Matrix3d::Zero();
  Eigen::Vector3d Jtr = Eigen::Vector3d::Zero();
  double ss = 0.0;
};

inline Normal assemble(const std::vector<double>& t, const std::vector<double>& v, const std::array<double, 3>& p) {
  Normal n;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const auto j = exp_model_jacobian(t[i], p);
    const Eigen::Vector3d J(j[0], j[1], j[2]);
    const double r = exp_model(t[i], p) - v[i];
    n.JtJ.noalias() += J * J.transpose();
    n.Jtr += J * r;
    n.ss += r * r;
  }
  return n;
}

inline double sum_squares(const std::vector<double>& t, const std::vector<double>& v, const std::array<double, 3>& p) {
  double ss = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double r = exp_model(t[i], p) - v[i];
    ss += r * r;
  }
  return ss;
}

}  // namespace detail

/// Levenberg-Marquardt least squares for a exp(-lambda t) + c with the
/// analytic Jacobian. Failures come back as ok == false with a message.
inline FitResult exp_fit(const std::vector<double>& times_in, const std::vector<double>& values_in,
                         const FitOptions& opt = {}) {
  require(times_in.size() == values_in.size(), ErrorKind::validation, "times and values differ in length");
  std::vector<double> t, v;
  for (std::size_t i = 0; i < times_in.size(); ++i) {
    if (times_in[i] < opt.start_time) continue;
    require(std::isfinite(times_in[i]) && std::isfinite(values_in[i]), ErrorKind::validation, "non-finite fit input");
    require(t.empty() || times_in[i] > t.back(), ErrorKind::validation, "times must be strictly increasing");
    t.push_back(times_in[i]);
    v.push_back(values_in[i]);
  }
  require(t.size() >= 4, ErrorKind::validation, "exponential fit needs at least 4 points");
  const std::size_t n = t.size();

  // Initial guess from the plateau and the half-decay time.
  const std::size_t tail = std::max<std::size_t>(1, n / 10);
  double c0 = 0.0;
  for (std::size_t i = n - tail; i < n; ++i) c0 += v[i];
  c0 /= static_cast<double>(tail);
  const double a0 = v[0] - c0;
  double lambda0 = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (v[i] < c0 + 0.5 * a0) {
      if (t[i] > t[0]) lambda0 = 1.0 / (t[i] - t[0]);
      break;
    }
  }

  std::array<double, 3> p{a0, lambda0, c0};
  FitResult res;
  double mu = 1e-3;
  detail::Normal ne = detail::assemble(t, v, p);
  // Largest cosine between a Jacobian column and the residual; zero at a
  // stationary point regardless of the data scale.
  auto gradient_cosine = [](const detail::Normal& m) {
    const double rn = std::sqrt(m.ss);
    double worst = 0.0;
    for (int j = 0; j < 3; ++j) {
      const double cn = std::sqrt(m.JtJ(j, j)) * rn;
      if (cn > 0.0) worst = std::max(worst, std::abs(m.Jtr[j]) / cn);
    }
    return worst;
  };
  // Below this lambda the model is a straight line over the data and the
  // optimum lies on the boundary lambda -> 0 with |a| -> infinity.
  const double linear_limit = 1e-3 / (t.back() - t.front());
  bool converged = false;
  bool degenerate = false;
  int it = 0;
  for (; it < opt.max_iter; ++it) {
    if (std::abs(p[1]) < linear_limit) {
      degenerate = true;
      break;
    }
    if (ne.ss == 0.0 || gradient_cosine(ne) <= 1e-10) {
      converged = true;
      break;
    }
    const Eigen::Vector3d diag = ne.JtJ.diagonal().cwiseMax(1e-12 * std::max(ne.JtJ.diagonal().maxCoeff(), 1e-300));
    bool accepted = false;
    while (mu < 1e20) {
      Eigen::Matrix3d A = ne.JtJ;
      A.diagonal() += mu * diag;
      const Eigen::Vector3d step = A.ldlt().solve(-ne.Jtr);
      const std::array<double, 3> trial{p[0] + step[0], p[1] + step[1], p[2] + step[2]};
      const double ss_trial = detail::sum_squares(t, v, trial);
      if (std::isfinite(ss_trial) && ss_trial <= ne.ss) {
        const double rel_step = step.norm() / (Eigen::Vector3d(p[0], p[1], p[2]).norm() + 1e-30);
        const double old_ss = ne.ss;
        p = trial;
        ne = detail::assemble(t, v, p);
        mu = std::max(mu / 3.0, 1e-15);
        accepted = true;
        if (rel_step <= 1e-12 && old_ss - ss_trial <= 1e-14 * old_ss) converged = true;
        break;
      }
      mu *= 4.0;
    }
    if (!accepted) {
      // No descent direction left at machine precision.
      converged = true;
      break;
    }
    if (converged) break;
  }
  res.iterations = it;
  res.a = p[0];
  res.lambda = p[1];
  res.c = p[2];

  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(n);
  double ss_tot = 0.0;
  for (double x : v) ss_tot += (x - mean) * (x - mean);
  res.r2 = ss_tot > 0.0 ? 1.0 - ne.ss / ss_tot : (ne.ss == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity());

  if (!std::isfinite(res.a) || !std::isfinite(res.lambda) || !std::isfinite(res.c)) {
    res.message = "fit diverged (non-finite parameters)";
    return res;
  }
  if (degenerate) {
    res.message = "no exponential decay: the fit degenerates to a linear trend (lambda -> 0)";
    return res;
  }
  if (!converged) {
    res.message = "fit did not converge within " + std::to_string(opt.max_iter) + " iterations";
    return res;
  }

  const Eigen::FullPivLU<Eigen::Matrix3d> lu(ne.JtJ);
  if (lu.rank() < 3 || std::abs(res.a) <= 1e-12 * std::max(1.0, std::abs(res.c))) {
    res.message = "decay rate unidentifiable (amplitude ~ 0 or singular normal matrix)";
    return res;
  }
  if (res.lambda <= 0.0) {
    res.message = "non-positive decay rate at optimum";
    return res;
  }

  const int dof = static_cast<int>(n) - 3;
  const double s2 = ne.ss / dof;
  const Eigen::Matrix3d cov = s2 * lu.inverse();
  const boost::math::students_t dist(dof);
  const double tq = boost::math::quantile(boost::math::complement(dist, 0.025));
  res.ci_a = tq * std::sqrt(std::max(cov(0, 0), 0.0));
  res.ci_lambda = tq * std::sqrt(std::max(cov(1, 1), 0.0));
  res.ci_c = tq * std::sqrt(std::max(cov(2, 2), 0.0));
  res.ok = true;
  return res;
}

/// Jacobian^T residual at p, for checking the first-order optimality of a fit.
inline Eigen::Vector3d fit_gradient(const std::vector<double>& t, const std::vector<double>& v,
                                    const std::array<double, 3>& p) {
  return detail::assemble(t, v, p).Jtr;
}

// ---------------------------------------------------------------------------

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  require(x.size() == y.size(), ErrorKind::validation, "pearson inputs differ in length");
  require(x.size() >= 2, ErrorKind::validation, "pearson needs at least two points");
  const auto n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw Error(ErrorKind::undefined_correlation, "zero variance in pearson input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

struct CorrelationSummary {
  std::vector<std::pair<double, double>> pairs;  // (mean D_eps, rmse)
  double pearson_r = 0.0;
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
};

/// Scatter of RMSE against mean D_eps with an OLS line rmse ~ D_eps.
inline CorrelationSummary rmse_vs_divergence(const ErrorSeries& err, const DivergenceSeries& div,
                                             std::size_t first_step = 0) {
  require(err.rmse.size() == div.mean.size(), ErrorKind::validation, "error and divergence grids differ");
  CorrelationSummary out;
  std::vector<double> x, y;
  for (std::size_t k = first_step; k < div.mean.size(); ++k) {
    x.push_back(div.mean[k]);
    y.push_back(err.rmse[k]);
    out.pairs.emplace_back(div.mean[k], err.rmse[k]);
  }
  out.pearson_r = pearson(x, y);
  const auto n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  out.slope = sxy / sxx;
  out.intercept = my - out.slope * mx;
  out.r2 = out.pearson_r * out.pearson_r;
  return out;
}

}  // namespace filterstab::metrics
