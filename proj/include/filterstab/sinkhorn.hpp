#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "filterstab/core.hpp"
#include "filterstab/measures.hpp"

namespace filterstab::sinkhorn {

struct SinkhornConfig {
  double epsilon = 0.01;
  double rel_tol = 1e-3;  // relative L1 change of the potentials
  int max_iter = 10000;

  void validate() const {
    require(epsilon > 0.0 && std::isfinite(epsilon), ErrorKind::config, "epsilon must be > 0");
    require(rel_tol > 0.0 && rel_tol < 1.0, ErrorKind::config, "rel_tol must lie in (0, 1)");
    require(max_iter >= 1, ErrorKind::config, "max_iter must be >= 1");
  }
};

struct DualPotentials {
  Eigen::VectorXd a;
  Eigen::VectorXd b;
  int iterations = 0;
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C[i][j] = |x_i - y_j|^2.
inline RowMatrix cost_matrix(const PointMatrix& x, const PointMatrix& y) {
  require(x.cols() == y.cols(), ErrorKind::validation,
          "dimension mismatch: " + std::to_string(x.cols()) + " vs " + std::to_string(y.cols()));
  RowMatrix C(x.rows(), y.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < y.rows(); ++j) C(i, j) = (x.row(i) - y.row(j)).squaredNorm();
  return C;
}

inline RowMatrix cost_matrix(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
  return cost_matrix(mu.points(), nu.points());
}

namespace detail {

/// Atoms with positive weight, and their log-weights.
struct Support {
  PointMatrix points;
  Eigen::RowVectorXd log_weights;
  Eigen::VectorXd weights;
  std::vector<Eigen::Index> kept;
};

inline Support positive_support(const EmpiricalMeasure& m) {
  Support s;
  for (Eigen::Index i = 0; i < m.size(); ++i)
    if (m.weights()[i] > 0.0) s.kept.push_back(i);
  const auto n = static_cast<Eigen::Index>(s.kept.size());
  s.points.resize(n, m.dim());
  s.log_weights.resize(n);
  s.weights.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    s.points.row(r) = m.points().row(s.kept[static_cast<std::size_t>(r)]);
    s.weights[r] = m.weights()[s.kept[static_cast<std::size_t>(r)]];
    s.log_weights[r] = std::log(s.weights[r]);
  }
  return s;
}

/// out_i = -eps * LSE_k(h_k + G_ik) with G = -C/eps and h = log w + pot/eps.
inline void softmin_rows(const RowMatrix& G, const Eigen::RowVectorXd& h, double eps, Eigen::VectorXd& out) {
  const Eigen::Index n = G.rows();
  out.resize(n);
  Eigen::RowVectorXd v(G.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    v.noalias() = G.row(i) + h;
    const double top = v.maxCoeff();
    // The clamp keeps Eigen's vectorized exp off its slow underflow path.
    out[i] = -eps * (top + std::log((v.array() - top).max(-700.0).exp().sum()));
  }
}

/// Row soft-min that skips kernel entries too small to register in double
/// precision. At refresh time each row keeps the columns k with
/// G_ik + h_k >= max - (kDrop + kSlack). While h stays within kSlack / 2 of
/// the refresh value (sup norm), every skipped term remains below e^-kDrop
/// of the row maximum, so the result matches softmin_rows to rounding.
/// Once the kept fraction exceeds one half it runs dense, retrying every
/// 64 calls.
class TruncatedSoftmin {
 public:
  static constexpr double kDrop = 40.0;
  static constexpr double kSlack = 20.0;

  explicit TruncatedSoftmin(const RowMatrix& G) : G_(G) {}

  void operator()(const Eigen::RowVectorXd& h, double eps, Eigen::VectorXd& out) {
    if (dense_ && ++dense_calls_ % 64 != 0) {
      softmin_rows(G_, h, eps, out);
      return;
    }
    if (dense_ || !ready_ || (h - h_ref_).cwiseAbs().maxCoeff() > 0.5 * kSlack) {
      refresh(h, eps, out);
      return;
    }
    const Eigen::Index n = G_.rows();
    out.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto begin = row_ptr_[static_cast<std::size_t>(i)];
      const auto end = row_ptr_[static_cast<std::size_t>(i) + 1];
      double top = -std::numeric_limits<double>::infinity();
      for (auto p = begin; p < end; ++p) {
        vals_[p] = g_[p] + h[cols_[p]];
        top = std::max(top, vals_[p]);
      }
      double sum = 0.0;
      for (auto p = begin; p < end; ++p) sum += std::exp(vals_[p] - top);
      out[i] = -eps * (top + std::log(sum));
    }
  }

 private:
  void refresh(const Eigen::RowVectorXd& h, double eps, Eigen::VectorXd& out) {
    const Eigen::Index n = G_.rows();
    const Eigen::Index m = G_.cols();
    out.resize(n);
    row_ptr_.assign(1, 0);
    cols_.clear();
    g_.clear();
    Eigen::RowVectorXd v(m);
    for (Eigen::Index i = 0; i < n; ++i) {
      v.noalias() = G_.row(i) + h;
      const double top = v.maxCoeff();
      out[i] = -eps * (top + std::log((v.array() - top).max(-700.0).exp().sum()));
      const double keep = top - kDrop - kSlack;
      for (Eigen::Index k = 0; k < m; ++k)
        if (v[k] >= keep) {
          cols_.push_back(k);
          g_.push_back(G_(i, k));
        }
      row_ptr_.push_back(cols_.size());
    }
    vals_.resize(cols_.size());
    h_ref_ = h;
    ready_ = true;
    dense_ = 2 * cols_.size() > static_cast<std::size_t>(n * m);
  }

  const RowMatrix& G_;
  std::vector<std::size_t> row_ptr_;
  std::vector<Eigen::Index> cols_;
  std::vector<double> g_;
  std::vector<double> vals_;
  Eigen::RowVectorXd h_ref_;
  bool ready_ = false;
  bool dense_ = false;
  long dense_calls_ = 0;
};

inline std::string format_error(double err) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", err);
  return buf;
}

inline double relative_l1(const Eigen::VectorXd& fresh, const Eigen::VectorXd& old) {
  return (fresh - old).lpNorm<1>() / std::max(old.lpNorm<1>(), 1e-30);
}

inline Eigen::VectorXd expand(const Eigen::VectorXd& compact, const std::vector<Eigen::Index>& kept, Eigen::Index full,
                              const Eigen::VectorXd& fill) {
  Eigen::VectorXd out = fill;
  out.conservativeResize(full);
  for (std::size_t r = 0; r < kept.size(); ++r) out[kept[r]] = compact[static_cast<Eigen::Index>(r)];
  return out;
}

}  // namespace detail

struct OtResult {
  DualPotentials potentials;
  double value = 0.0;
  double last_relative_error = 0.0;
};

/// Entropic OT between mu and nu via alternating log-domain updates of the
/// dual potentials. Stops once the smaller of the two relative L1 changes is
/// <= rel_tol. Zero-weight atoms take no part in the iteration; their
/// potentials are the c-transform of the converged opposite potential.
inline OtResult ot_dual(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, const SinkhornConfig& cfg) {
  cfg.validate();
  require(mu.dim() == nu.dim(), ErrorKind::validation, "measures live in different dimensions");
  const double eps = cfg.epsilon;
  const auto sx = detail::positive_support(mu);
  const auto sy = detail::positive_support(nu);

  const RowMatrix G = cost_matrix(sx.points, sy.points) * (-1.0 / eps);
  const RowMatrix Gt = G.transpose();

  Eigen::VectorXd a = Eigen::VectorXd::Zero(G.rows());
  Eigen::VectorXd b = Eigen::VectorXd::Zero(G.cols());
  Eigen::VectorXd a_new, b_new;
  detail::TruncatedSoftmin update_a(G), update_b(Gt);
  double err = 0.0;
  int it = 0;
  for (;;) {
    update_a(sy.log_weights + b.transpose() / eps, eps, a_new);
    update_b(sx.log_weights + a_new.transpose() / eps, eps, b_new);
    ++it;
    err = std::min(detail::relative_l1(a_new, a), detail::relative_l1(b_new, b));
    a.swap(a_new);
    b.swap(b_new);
    if (!a.allFinite() || !b.allFinite())
      throw Error(ErrorKind::numerical, "non-finite Sinkhorn potential after " + std::to_string(it) + " iterations");
    if (err <= cfg.rel_tol) break;
    if (it >= cfg.max_iter)
      throw NonConvergenceError("Sinkhorn did not converge in " + std::to_string(cfg.max_iter) +
                                    " iterations (last relative error " + detail::format_error(err) + ")",
                                err);
  }

  OtResult res;
  res.value = sx.weights.dot(a) + sy.weights.dot(b);
  res.last_relative_error = err;
  res.potentials.iterations = it;

  res.potentials.a = a;
  res.potentials.b = b;
  if (static_cast<Eigen::Index>(sx.kept.size()) != mu.size()) {
    Eigen::VectorXd fill;
    detail::softmin_rows(cost_matrix(mu.points(), sy.points) * (-1.0 / eps), sy.log_weights + b.transpose() / eps,
                         eps, fill);
    res.potentials.a = detail::expand(a, sx.kept, mu.size(), fill);
  }
  if (static_cast<Eigen::Index>(sy.kept.size()) != nu.size()) {
    Eigen::VectorXd fill;
    detail::softmin_rows(cost_matrix(nu.points(), sx.points) * (-1.0 / eps), sx.log_weights + a.transpose() / eps,
                         eps, fill);
    res.potentials.b = detail::expand(b, sy.kept, nu.size(), fill);
  }
  return res;
}

struct SymmetricResult {
  Eigen::VectorXd a;
  int iterations = 0;
  double value = 0.0;  // OT_eps(mu, mu) = 2 <mu, a>
};

/// Damped fixed point a <- (a + T(a)) / 2 for the self-transport term.
inline SymmetricResult symmetric_potential(const EmpiricalMeasure& mu, const SinkhornConfig& cfg) {
  cfg.validate();
  const double eps = cfg.epsilon;
  const auto s = detail::positive_support(mu);
  const RowMatrix G = cost_matrix(s.points, s.points) * (-1.0 / eps);

  Eigen::VectorXd a = Eigen::VectorXd::Zero(G.rows());
  Eigen::VectorXd t;
  int it = 0;
  for (;;) {
    detail::softmin_rows(G, s.log_weights + a.transpose() / eps, eps, t);
    Eigen::VectorXd a_new = 0.5 * (a + t);
    ++it;
    const double err = detail::relative_l1(a_new, a);
    a.swap(a_new);
    if (!a.allFinite()) throw Error(ErrorKind::numerical, "non-finite symmetric Sinkhorn potential");
    if (err <= cfg.rel_tol) break;
    if (it >= cfg.max_iter)
      throw NonConvergenceError("symmetric Sinkhorn did not converge in " + std::to_string(cfg.max_iter) +
                                    " iterations (last relative error " + detail::format_error(err) + ")",
                                err);
  }
  SymmetricResult res;
  res.value = 2.0 * s.weights.dot(a);
  res.iterations = it;
  if (static_cast<Eigen::Index>(s.kept.size()) == mu.size()) {
    res.a = std::move(a);
  } else {
    Eigen::VectorXd fill;
    detail::softmin_rows(cost_matrix(mu.points(), s.points) * (-1.0 / eps), s.log_weights + a.transpose() / eps, eps,
                         fill);
    res.a = detail::expand(a, s.kept, mu.size(), fill);
  }
  return res;
}

struct DivergenceReport {
  double s_eps = 0.0;
  double ot_xy = 0.0;
  double ot_xx = 0.0;
  double ot_yy = 0.0;
  int iterations = 0;  // summed over the three solves

  /// Raw S_eps below this is treated as a convergence problem worth flagging.
  bool suspicious_negative() const { return s_eps < -1e-6; }
};

/// S_eps = OT(mu, nu) - OT(mu, mu)/2 - OT(nu, nu)/2.
inline DivergenceReport sinkhorn_divergence_report(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu,
                                                   const SinkhornConfig& cfg) {
  const OtResult xy = ot_dual(mu, nu, cfg);
  const SymmetricResult xx = symmetric_potential(mu, cfg);
  const SymmetricResult yy = symmetric_potential(nu, cfg);
  DivergenceReport r;
  r.ot_xy = xy.value;
  r.ot_xx = xx.value;
  r.ot_yy = yy.value;
  r.s_eps = xy.value - 0.5 * xx.value - 0.5 * yy.value;
  r.iterations = xy.potentials.iterations + xx.iterations + yy.iterations;
  return r;
}

inline double sinkhorn_divergence(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, const SinkhornConfig& cfg) {
  return sinkhorn_divergence_report(mu, nu, cfg).s_eps;
}

/// D_eps = sqrt(max(S_eps, 0)).
inline double d_eps(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, const SinkhornConfig& cfg) {
  return std::sqrt(std::max(sinkhorn_divergence(mu, nu, cfg), 0.0));
}

/// Exact W2 for uniform measures of equal size N <= 8 by enumerating
/// permutation couplings.
inline double w2_exact_small(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
  require(mu.size() == nu.size(), ErrorKind::unsupported_instance, "exact W2 needs equal atom counts");
  require(mu.size() <= 8, ErrorKind::unsupported_instance, "exact W2 limited to N <= 8");
  require(mu.is_uniform() && nu.is_uniform(), ErrorKind::unsupported_instance, "exact W2 needs uniform weights");
  const RowMatrix C = cost_matrix(mu, nu);
  const auto n = static_cast<int>(mu.size());
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += C(i, perm[static_cast<std::size_t>(i)]);
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return std::sqrt(best / n);
}

}  // namespace filterstab::sinkhorn
