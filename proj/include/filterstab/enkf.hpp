#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "filterstab/core.hpp"
#include "filterstab/lorenz96.hpp"
#include "filterstab/measures.hpp"
#include "filterstab/propagate.hpp"
#include "filterstab/rng.hpp"

namespace filterstab::enkf {

struct EnkfConfig {
  int N = 500;
  double localization_radius = 2.0;  // Gaspari-Cohn c, grid-index units

  void validate() const {
    require(N >= 2, ErrorKind::config, "EnKF needs N >= 2");
    require(localization_radius > 0.0, ErrorKind::config, "localization radius must be > 0");
  }
};

/// Fifth-order piecewise rational Gaspari-Cohn correlation, support [0, 2c].
inline double gaspari_cohn(double r, double c) {
  require(std::isfinite(r) && std::isfinite(c), ErrorKind::validation, "Gaspari-Cohn arguments must be finite");
  require(r >= 0.0, ErrorKind::validation, "Gaspari-Cohn distance must be >= 0");
  require(c > 0.0, ErrorKind::validation, "Gaspari-Cohn radius must be > 0");
  const double z = r / c;
  if (z <= 1.0) {
    const double z2 = z * z, z3 = z2 * z;
    return 1.0 - (5.0 / 3.0) * z2 + (5.0 / 8.0) * z3 + 0.5 * z2 * z2 - 0.25 * z3 * z2;
  }
  if (z < 2.0) {
    const double z2 = z * z, z3 = z2 * z;
    return 4.0 - 5.0 * z + (5.0 / 3.0) * z2 + (5.0 / 8.0) * z3 - 0.5 * z2 * z2 + (1.0 / 12.0) * z3 * z2 -
           2.0 / (3.0 * z);
  }
  return 0.0;
}

inline int cyclic_distance(int i, int j, int d) {
  const int diff = std::abs(i - j);
  return std::min(diff, d - diff);
}

/// rho[i][j] = GC(cyclic distance, c).
inline Eigen::MatrixXd build_localization(int d, double c) {
  require(d >= 1, ErrorKind::validation, "localization dimension must be >= 1");
  Eigen::MatrixXd rho(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) rho(i, j) = gaspari_cohn(cyclic_distance(i, j, d), c);
  return rho;
}

/// Localized sample covariance rho o P with the N-1 divisor.
inline Eigen::MatrixXd localized_covariance(const PointMatrix& X, const Eigen::MatrixXd& rho) {
  const Eigen::RowVectorXd mean = X.colwise().mean();
  const Eigen::MatrixXd A = X.rowwise() - mean;
  Eigen::MatrixXd P = (A.transpose() * A) / static_cast<double>(X.rows() - 1);
  return P.cwiseProduct(rho);
}

/// Kalman gain K = P H^T (H P H^T + sigma2 I)^{-1}, d x q. The q x q system is
/// factorized with LLT; one retry with 1e-10 diagonal jitter.
inline Eigen::MatrixXd kalman_gain(const Eigen::MatrixXd& P, const l96::ObservationModel& obs) {
  const int q = obs.q();
  const Eigen::Index d = P.rows();
  Eigen::MatrixXd PHt(d, q);
  Eigen::MatrixXd S(q, q);
  for (int b = 0; b < q; ++b) {
    const int jb = obs.observed_indices[static_cast<std::size_t>(b)];
    PHt.col(b) = P.col(jb);
    for (int a = 0; a < q; ++a) S(a, b) = P(obs.observed_indices[static_cast<std::size_t>(a)], jb);
  }
  S.diagonal().array() += obs.sigma2;

  Eigen::LLT<Eigen::MatrixXd> llt(S);
  if (llt.info() != Eigen::Success) {
    S.diagonal().array() += 1e-10;
    llt.compute(S);
    if (llt.info() != Eigen::Success)
      throw Error(ErrorKind::numerical, "innovation covariance H P H^T + R is not positive definite (min diag " +
                                            std::to_string(S.diagonal().minCoeff()) + ")");
  }
  // K^T = S^{-1} (P H^T)^T since S is symmetric.
  return llt.solve(PHt.transpose()).transpose();
}

/// Perturbed-observation analysis with state-space localization.
inline EmpiricalMeasure enkf_analysis_step(const EmpiricalMeasure& forecast, const Eigen::VectorXd& y,
                                           const l96::ObservationModel& obs, const Eigen::MatrixXd& rho,
                                           Engine& eng) {
  require(forecast.size() >= 2, ErrorKind::validation, "EnKF analysis needs at least two members");
  require(forecast.is_uniform(), ErrorKind::validation, "EnKF forecast must be uniformly weighted");
  require(y.size() == obs.q(), ErrorKind::validation, "observation dimension mismatch");
  require(rho.rows() == forecast.dim() && rho.cols() == forecast.dim(), ErrorKind::validation,
          "localization matrix dimension mismatch");

  const PointMatrix& Xf = forecast.points();
  const Eigen::MatrixXd K = kalman_gain(localized_covariance(Xf, rho), obs);

  const Eigen::Index n = Xf.rows();
  const int q = obs.q();
  const double sd = std::sqrt(obs.sigma2);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd innovation(n, q);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int j = 0; j < q; ++j)
      innovation(i, j) = y[j] + sd * normal(eng) - Xf(i, obs.observed_indices[static_cast<std::size_t>(j)]);

  PointMatrix Xa = Xf + innovation * K.transpose();
  return EmpiricalMeasure::uniform(std::move(Xa));
}

inline EmpiricalMeasure enkf_analysis_step(const EmpiricalMeasure& forecast, const Eigen::VectorXd& y,
                                           const l96::ObservationModel& obs, const Eigen::MatrixXd& rho,
                                           Seed seed) {
  Engine eng = make_engine(seed);
  return enkf_analysis_step(forecast, y, obs, rho, eng);
}

/// Stepwise EnKF so long runs need not keep every ensemble in memory.
template <class Propagate>
class EnsembleKalmanFilter {
 public:
  EnsembleKalmanFilter(const GaussianSpec& init, const l96::ObservationModel& obs, const EnkfConfig& ecfg,
                       Propagate propagate, Seed seed)
      : obs_(obs),
        rho_(build_localization(static_cast<int>(init.mean.size()), ecfg.localization_radius)),
        propagate_(std::move(propagate)),
        noise_(make_engine(derive_seed(seed, "enkf/perturb", 0))) {
    ecfg.validate();
    obs_.validate(static_cast<int>(init.mean.size()));
    current_ = sample_gaussian(init, ecfg.N, derive_seed(seed, "enkf/init", 0));
  }

  const EmpiricalMeasure& current() const { return current_; }

  /// Forecast with f_g, then assimilate y.
  const EmpiricalMeasure& step(const Eigen::VectorXd& y) {
    PointMatrix X = current_.points();
    propagate_rows(X, propagate_);
    current_ = enkf_analysis_step(EmpiricalMeasure::uniform(std::move(X)), y, obs_, rho_, noise_);
    return current_;
  }

 private:
  l96::ObservationModel obs_;
  Eigen::MatrixXd rho_;
  Propagate propagate_;
  Engine noise_;
  EmpiricalMeasure current_;
};

/// pi_0 is the raw initial ensemble; y_0 is not assimilated.
template <class Propagate>
std::vector<EmpiricalMeasure> enkf_run(const GaussianSpec& init, const l96::ObservationRecord& obsrec,
                                       const l96::ObservationModel& obs, Propagate propagate,
                                       const EnkfConfig& ecfg, Seed seed) {
  require(!obsrec.y.empty(), ErrorKind::validation, "observation record is empty");
  EnsembleKalmanFilter<Propagate> filter(init, obs, ecfg, std::move(propagate), seed);
  std::vector<EmpiricalMeasure> out;
  out.reserve(obsrec.size());
  out.push_back(filter.current());
  for (std::size_t k = 1; k < obsrec.size(); ++k) out.push_back(filter.step(obsrec.y[k]));
  return out;
}

inline std::vector<EmpiricalMeasure> enkf_run(const GaussianSpec& init, const l96::ObservationRecord& obsrec,
                                              const l96::ObservationModel& obs, const l96::ModelConfig& cfg,
                                              const EnkfConfig& ecfg, Seed seed) {
  require(init.mean.size() == cfg.d, ErrorKind::validation, "initial mean dimension does not match model");
  return enkf_run(init, obsrec, obs, L96Propagator(cfg), ecfg, seed);
}

}  // namespace filterstab::enkf
