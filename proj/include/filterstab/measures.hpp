#pragma once

#include <cmath>
#include <ostream>
#include <utility>

#include "filterstab/core.hpp"
#include "filterstab/rng.hpp"

namespace filterstab {

/// N weighted atoms in R^d. Weights are normalized on construction.
class EmpiricalMeasure {
 public:
  EmpiricalMeasure() = default;

  static EmpiricalMeasure uniform(PointMatrix points) {
    const auto n = points.rows();
    require(n >= 1, ErrorKind::validation, "empirical measure needs at least one atom");
    Eigen::VectorXd w = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
    return EmpiricalMeasure(std::move(points), std::move(w));
  }

  static EmpiricalMeasure weighted(PointMatrix points, Eigen::VectorXd weights) {
    require(points.rows() >= 1, ErrorKind::validation, "empirical measure needs at least one atom");
    require(weights.size() == points.rows(), ErrorKind::validation, "weight count does not match atom count");
    require(weights.allFinite() && (weights.array() >= 0.0).all(), ErrorKind::validation,
            "weights must be finite and nonnegative");
    const double total = weights.sum();
    require(total > 0.0, ErrorKind::validation, "weights sum to zero");
    weights /= total;
    return EmpiricalMeasure(std::move(points), std::move(weights));
  }

  const PointMatrix& points() const { return points_; }
  const Eigen::VectorXd& weights() const { return weights_; }
  Eigen::Index size() const { return points_.rows(); }
  Eigen::Index dim() const { return points_.cols(); }

  bool is_uniform() const {
    const double w0 = 1.0 / static_cast<double>(size());
    return ((weights_.array() - w0).abs() <= 1e-15).all();
  }

 private:
  EmpiricalMeasure(PointMatrix points, Eigen::VectorXd weights)
      : points_(std::move(points)), weights_(std::move(weights)) {
    require(points_.allFinite(), ErrorKind::invalid_state, "non-finite atom in empirical measure");
  }

  PointMatrix points_;
  Eigen::VectorXd weights_;
};

/// Isotropic Gaussian N(mean, variance_scale * I_d).
struct GaussianSpec {
  StateVector mean;
  double variance_scale = 1.0;

  void validate() const {
    require(mean.size() >= 1, ErrorKind::config, "Gaussian mean is empty");
    require(mean.allFinite(), ErrorKind::config, "Gaussian mean must be finite");
    require(variance_scale > 0.0 && std::isfinite(variance_scale), ErrorKind::config,
            "variance_scale must be > 0");
  }
};

inline EmpiricalMeasure sample_gaussian(const GaussianSpec& spec, Eigen::Index n, Engine& eng) {
  spec.validate();
  require(n >= 1, ErrorKind::validation, "sample size must be >= 1");
  const double sd = std::sqrt(spec.variance_scale);
  std::normal_distribution<double> normal(0.0, 1.0);
  PointMatrix pts(n, spec.mean.size());
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < pts.cols(); ++j) pts(i, j) = spec.mean[j] + sd * normal(eng);
  return EmpiricalMeasure::uniform(std::move(pts));
}

inline EmpiricalMeasure sample_gaussian(const GaussianSpec& spec, Eigen::Index n, Seed seed) {
  Engine eng = make_engine(seed);
  return sample_gaussian(spec, n, eng);
}

inline StateVector measure_mean(const EmpiricalMeasure& m) {
  return (m.points().transpose() * m.weights()).eval();
}

/// Trace of the unbiased weighted covariance; reduces to the N-1 divisor for
/// uniform weights.
inline double measure_covariance_trace(const EmpiricalMeasure& m) {
  require(m.size() >= 2, ErrorKind::insufficient_sample, "covariance needs at least two atoms");
  const StateVector mean = measure_mean(m);
  const Eigen::VectorXd& w = m.weights();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < m.size(); ++i) acc += w[i] * (m.points().row(i).transpose() - mean).squaredNorm();
  const double denom = 1.0 - w.squaredNorm();
  require(denom > 0.0, ErrorKind::insufficient_sample, "all weight on a single atom");
  return acc / denom;
}

inline void write_csv(std::ostream& os, const EmpiricalMeasure& m) {
  const auto old_precision = os.precision(17);
  os << "weight";
  for (Eigen::Index j = 1; j <= m.dim(); ++j) os << ",x_" << j;
  os << '\n';
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    os << m.weights()[i];
    for (Eigen::Index j = 0; j < m.dim(); ++j) os << ',' << m.points()(i, j);
    os << '\n';
  }
  os.precision(old_precision);
}

}  // namespace filterstab
