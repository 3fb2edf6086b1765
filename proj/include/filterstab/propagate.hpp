#pragma once

#include "filterstab/core.hpp"
#include "filterstab/lorenz96.hpp"

namespace filterstab {

/// Advances a state by one observation gap with the Lorenz-96 flow map f_g.
class L96Propagator {
 public:
  explicit L96Propagator(const l96::ModelConfig& cfg) : cfg_(cfg), steps_(cfg.steps_for(cfg.g)) { cfg.validate(); }

  void operator()(Eigen::Ref<Eigen::VectorXd> x) const { l96::integrate_in_place(x, steps_, cfg_.dt, cfg_.F); }

  const l96::ModelConfig& config() const { return cfg_; }

 private:
  l96::ModelConfig cfg_;
  long steps_;
};

/// x_{k+1} = x_k; used for linear-Gaussian reference problems.
struct IdentityPropagator {
  void operator()(Eigen::Ref<Eigen::VectorXd>) const {}
};

template <class Propagate>
void propagate_rows(PointMatrix& points, const Propagate& propagate) {
  Eigen::VectorXd x(points.cols());
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    x = points.row(i).transpose();
    propagate(x);
    points.row(i) = x.transpose();
  }
}

}  // namespace filterstab
