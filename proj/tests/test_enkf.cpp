#include <cmath>

#include <gtest/gtest.h>

#include "filterstab/enkf.hpp"
#include "filterstab/metrics.hpp"
#include "kalman_oracle.hpp"
#include "test_util.hpp"

using namespace filterstab;
using namespace filterstab::enkf;

TEST(GaspariCohn, BoundaryValues) {
  EXPECT_DOUBLE_EQ(gaspari_cohn(0.0, 2.0), 1.0);
  EXPECT_DOUBLE_EQ(gaspari_cohn(2.0 * 2.0 + 0.1, 2.0), 0.0);
  EXPECT_NEAR(gaspari_cohn(2.0, 2.0), 5.0 / 24.0, 1e-15);
  EXPECT_EQ(gaspari_cohn(4.0, 2.0), 0.0);
}

TEST(GaspariCohn, BranchesMeetAtUnitRatio) {
  // Evaluate the outer polynomial at z = 1 directly.
  const double z = 1.0;
  const double outer = 4.0 - 5.0 * z + (5.0 / 3.0) * z * z + (5.0 / 8.0) * z * z * z - 0.5 * std::pow(z, 4) +
                       std::pow(z, 5) / 12.0 - 2.0 / (3.0 * z);
  EXPECT_NEAR(outer, 5.0 / 24.0, 1e-15);
  EXPECT_NEAR(gaspari_cohn(1.0 - 1e-9, 1.0), gaspari_cohn(1.0 + 1e-9, 1.0), 1e-8);
}

TEST(GaspariCohn, MonotoneAndBounded) {
  double prev = 1.0;
  for (double r = 0.0; r <= 5.0; r += 0.01) {
    const double v = gaspari_cohn(r, 2.0);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_LE(v, prev + 1e-15);
    prev = v;
  }
}

TEST(GaspariCohn, RejectsNegativeDistance) { EXPECT_ERROR_KIND(gaspari_cohn(-0.1, 2.0), ErrorKind::validation); }

TEST(Localization, CyclicRingStructure) {
  const Eigen::MatrixXd rho = build_localization(10, 2.0);
  EXPECT_TRUE(rho.isApprox(rho.transpose(), 0.0));
  for (int i = 0; i < 10; ++i) EXPECT_DOUBLE_EQ(rho(i, i), 1.0);
  EXPECT_DOUBLE_EQ(rho(0, 5), 0.0);
  EXPECT_DOUBLE_EQ(rho(0, 4), 0.0);
  EXPECT_NEAR(rho(0, 2), 5.0 / 24.0, 1e-15);
  EXPECT_DOUBLE_EQ(rho(0, 9), rho(0, 1));
  EXPECT_GE(rho.minCoeff(), 0.0);

  const Eigen::MatrixXd wide = build_localization(10, 10.0);
  EXPECT_GE(wide.minCoeff(), gaspari_cohn(5.0, 10.0));
  EXPECT_GT(wide.minCoeff(), 0.0);
}

TEST(Localization, LocalizedCovarianceKeepsSymmetryAndDiagonal) {
  const auto m = sample_gaussian(GaussianSpec{StateVector::Zero(10), 1.0}, 40, Seed{3});
  const Eigen::MatrixXd rho = build_localization(10, 2.0);
  const Eigen::MatrixXd P = localized_covariance(m.points(), rho);
  const Eigen::MatrixXd raw = localized_covariance(m.points(), Eigen::MatrixXd::Ones(10, 10));
  EXPECT_LE((P - P.transpose()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LE((P.diagonal() - raw.diagonal()).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_NEAR(raw.trace(), measure_covariance_trace(m), 1e-10);
}

TEST(KalmanGain, ScalarCase) {
  const auto obs = l96::ObservationModel::full(1, 1.0);
  const Eigen::MatrixXd K = kalman_gain(Eigen::MatrixXd::Ones(1, 1), obs);
  EXPECT_DOUBLE_EQ(K(0, 0), 0.5);
}

TEST(KalmanGain, SingularInnovationIsNumericalError) {
  const auto obs = l96::ObservationModel::full(2, 0.0);
  Eigen::MatrixXd P(2, 2);
  P << -1, 0, 0, 1;
  EXPECT_ERROR_KIND(kalman_gain(P, obs), ErrorKind::numerical);
}

TEST(EnkfAnalysis, HugeObservationNoiseLeavesForecast) {
  const auto f = sample_gaussian(GaussianSpec{StateVector::Constant(10, 1.0), 1.0}, 100, Seed{5});
  const auto obs = l96::ObservationModel::alternate(10, 1e12);
  const auto a = enkf_analysis_step(f, Eigen::VectorXd::Constant(5, 30.0), obs, build_localization(10, 2.0), Seed{6});
  EXPECT_LT((a.points() - f.points()).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(EnkfAnalysis, IdenticalMembersDoNotMove) {
  PointMatrix X(20, 10);
  X.rowwise() = Eigen::RowVectorXd::LinSpaced(10, -1, 1);
  const auto f = EmpiricalMeasure::uniform(X);
  const auto a = enkf_analysis_step(f, Eigen::VectorXd::Constant(5, 3.0), l96::ObservationModel::alternate(10, 0.4),
                                    build_localization(10, 2.0), Seed{1});
  EXPECT_EQ(a.points(), X);
}

TEST(EnkfAnalysis, PreservesSizeAndUniformWeights) {
  const auto f = sample_gaussian(GaussianSpec{StateVector::Zero(10), 1.0}, 57, Seed{5});
  const auto a = enkf_analysis_step(f, Eigen::VectorXd::Zero(5), l96::ObservationModel::alternate(10, 0.4),
                                    build_localization(10, 2.0), Seed{6});
  EXPECT_EQ(a.size(), 57);
  EXPECT_TRUE(a.is_uniform());
}

TEST(EnkfAnalysis, RejectsMismatchedObservation) {
  const auto f = sample_gaussian(GaussianSpec{StateVector::Zero(10), 1.0}, 10, Seed{5});
  EXPECT_ERROR_KIND(enkf_analysis_step(f, Eigen::VectorXd::Zero(4), l96::ObservationModel::alternate(10, 0.4),
                                       build_localization(10, 2.0), Seed{6}),
                    ErrorKind::validation);
}

TEST(EnkfLinearGaussian, MatchesExactKalmanFilter) {
  const int d = 2, steps = 20, N = 10000;
  const double r = 1.0;
  StateVector truth(d);
  truth << 1.0, -1.0;
  const GaussianSpec prior{StateVector::Zero(d), 1.0};

  l96::Trajectory traj;
  for (int k = 0; k <= steps; ++k) {
    traj.states.push_back(truth);
    traj.times.push_back(k);
  }
  const auto obs = l96::ObservationModel::full(d, r);
  const auto rec = l96::observe(traj, obs, 99, 0);

  EnkfConfig ecfg;
  ecfg.N = N;
  ecfg.localization_radius = 1e6;  // effectively no localization
  const auto run = enkf_run(prior, rec, obs, IdentityPropagator{}, ecfg, Seed{2024});
  ASSERT_EQ(run.size(), static_cast<std::size_t>(steps + 1));

  const std::vector<Eigen::VectorXd> ys(rec.y.begin() + 1, rec.y.end());
  const auto kf = kalman_identity(prior.mean, Eigen::MatrixXd::Identity(d, d), ys, r);
  for (int k = 1; k <= steps; ++k) {
    const auto& m = run[static_cast<std::size_t>(k)];
    const auto idx = static_cast<std::size_t>(k - 1);
    EXPECT_LE((measure_mean(m) - kf.mean[idx]).cwiseAbs().maxCoeff(), 0.05) << "step " << k;
    EXPECT_NEAR(measure_covariance_trace(m), kf.cov[idx].trace(), 0.10 * kf.cov[idx].trace()) << "step " << k;
  }
}

TEST(EnkfRun, ZeroStepsAndDeterminism) {
  l96::ModelConfig cfg;
  const StateVector x0 = l96::spin_up(1, cfg, 200);
  const auto obs = l96::ObservationModel::alternate(10, 0.4);
  EnkfConfig ecfg;
  ecfg.N = 50;
  const GaussianSpec init{x0, 0.1};

  const auto rec0 = l96::observe(l96::generate_truth(x0, 0, cfg), obs, 3, 0);
  const auto only = enkf_run(init, rec0, obs, cfg, ecfg, Seed{4});
  ASSERT_EQ(only.size(), 1u);
  EXPECT_EQ(only[0].points(), sample_gaussian(init, 50, derive_seed(4, "enkf/init", 0)).points());

  const auto rec = l96::observe(l96::generate_truth(x0, 8, cfg), obs, 3, 0);
  const auto a = enkf_run(init, rec, obs, cfg, ecfg, Seed{4});
  const auto b = enkf_run(init, rec, obs, cfg, ecfg, Seed{4});
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k].points(), b[k].points());
}

TEST(EnkfRun, Lorenz96ErrorSettlesBelowObservationNoise) {
  l96::ModelConfig cfg;
  const StateVector x0 = l96::spin_up(11, cfg);
  const auto truth = l96::generate_truth(x0, 200, cfg);
  const auto obs = l96::ObservationModel::alternate(10, 0.4);
  const auto rec = l96::observe(truth, obs, 12, 0);
  const auto run = enkf_run(GaussianSpec{x0, 0.1}, rec, obs, cfg, EnkfConfig{}, Seed{13});
  double acc = 0.0;
  int n = 0;
  for (std::size_t k = 0; k < run.size(); ++k) {
    if (truth.times[k] < 5.0) continue;
    const double e = metrics::scaled_l2_error(run[k], truth.states[k]);
    acc += e * e;
    ++n;
  }
  EXPECT_LT(acc / n, 2.0 * 0.4);
}
