#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "filterstab/measures.hpp"
#include "test_util.hpp"

using namespace filterstab;

namespace {

PointMatrix random_points(Eigen::Index n, Eigen::Index d, Seed seed) {
  Engine eng = make_engine(seed);
  std::normal_distribution<double> normal;
  PointMatrix p(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) p(i, j) = normal(eng);
  return p;
}

}  // namespace

TEST(EmpiricalMeasure, WeightedConstructorNormalizes) {
  Eigen::VectorXd w(3);
  w << 2, 1, 1;
  const auto m = EmpiricalMeasure::weighted(random_points(3, 2, 1), w);
  EXPECT_NEAR(m.weights().sum(), 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(m.weights()[0], 0.5);
  EXPECT_FALSE(m.is_uniform());
  EXPECT_TRUE(EmpiricalMeasure::uniform(random_points(7, 2, 1)).is_uniform());
}

TEST(EmpiricalMeasure, RejectsBadInputs) {
  Eigen::VectorXd neg(2);
  neg << 1, -0.5;
  EXPECT_ERROR_KIND(EmpiricalMeasure::weighted(random_points(2, 1, 1), neg), ErrorKind::validation);
  EXPECT_ERROR_KIND(EmpiricalMeasure::weighted(random_points(2, 1, 1), Eigen::VectorXd::Zero(2)),
                    ErrorKind::validation);
  EXPECT_ERROR_KIND(EmpiricalMeasure::uniform(PointMatrix(0, 3)), ErrorKind::validation);
  PointMatrix bad = random_points(2, 2, 1);
  bad(1, 1) = std::numeric_limits<double>::infinity();
  EXPECT_ERROR_KIND(EmpiricalMeasure::uniform(bad), ErrorKind::invalid_state);
}

TEST(MeasureMean, SmallCases) {
  PointMatrix one(1, 3);
  one << 1, -2, 3;
  EXPECT_EQ(measure_mean(EmpiricalMeasure::uniform(one)), StateVector(one.row(0).transpose()));
  PointMatrix two(2, 1);
  two << 0, 2;
  EXPECT_DOUBLE_EQ(measure_mean(EmpiricalMeasure::uniform(two))[0], 1.0);
}

TEST(MeasureMean, MatchesTwoPassSummation) {
  Engine eng = make_engine(5);
  std::uniform_real_distribution<double> unif(0.1, 1.0);
  Eigen::VectorXd w(200);
  for (auto& x : w) x = unif(eng);
  const auto m = EmpiricalMeasure::weighted(random_points(200, 6, 2), w);
  for (Eigen::Index j = 0; j < 6; ++j) {
    long double acc = 0.0L;
    for (Eigen::Index i = 0; i < m.size(); ++i)
      acc += static_cast<long double>(m.weights()[i]) * m.points()(i, j);
    EXPECT_NEAR(measure_mean(m)[j], static_cast<double>(acc), 1e-12);
  }
}

TEST(CovarianceTrace, HandCases) {
  PointMatrix same(4, 3);
  same.rowwise() = Eigen::RowVector3d(1, 2, 3);
  EXPECT_DOUBLE_EQ(measure_covariance_trace(EmpiricalMeasure::uniform(same)), 0.0);
  PointMatrix pm(2, 1);
  pm << -1, 1;
  EXPECT_DOUBLE_EQ(measure_covariance_trace(EmpiricalMeasure::uniform(pm)), 2.0);
  EXPECT_ERROR_KIND(measure_covariance_trace(EmpiricalMeasure::uniform(random_points(1, 2, 1))),
                    ErrorKind::insufficient_sample);
}

TEST(CovarianceTrace, WeightedFormReducesToUniform) {
  const PointMatrix p = random_points(50, 4, 8);
  const double u = measure_covariance_trace(EmpiricalMeasure::uniform(p));
  const double w = measure_covariance_trace(EmpiricalMeasure::weighted(p, Eigen::VectorXd::Constant(50, 3.0)));
  EXPECT_NEAR(u, w, 1e-12);
  EXPECT_GE(u, 0.0);
}

TEST(CovarianceTrace, MonteCarloGaussian) {
  GaussianSpec spec{StateVector::Zero(5), 3.0};
  const auto m = sample_gaussian(spec, 10000, Seed{17});
  EXPECT_NEAR(measure_covariance_trace(m), 15.0, 0.05 * 15.0);
}

TEST(SampleGaussian, MeanWithinCltBound) {
  StateVector mean(3);
  mean << 1, -4, 2.5;
  for (double v : {0.1, 1.0}) {
    const auto m = sample_gaussian(GaussianSpec{mean, v}, 100000, Seed{23});
    const StateVector emp = measure_mean(m);
    for (int j = 0; j < 3; ++j) EXPECT_LE(std::abs(emp[j] - mean[j]), 4.0 * std::sqrt(v / 1e5));
    EXPECT_TRUE(m.is_uniform());
  }
}

TEST(SampleGaussian, BitReproducibleForEqualSeeds) {
  GaussianSpec spec{StateVector::Constant(4, 2.0), 0.5};
  EXPECT_EQ(sample_gaussian(spec, 30, Seed{1}).points(), sample_gaussian(spec, 30, Seed{1}).points());
  EXPECT_NE(sample_gaussian(spec, 30, Seed{1}).points(), sample_gaussian(spec, 30, Seed{2}).points());
}

TEST(SampleGaussian, RejectsBadSpec) {
  EXPECT_ERROR_KIND(sample_gaussian(GaussianSpec{StateVector::Zero(2), 0.0}, 5, Seed{1}), ErrorKind::config);
}

TEST(MeasureCsv, WeightThenPointColumns) {
  PointMatrix p(2, 2);
  p << 0.1, 1.0 / 3.0, -2, 5;
  Eigen::VectorXd w(2);
  w << 1, 3;
  std::ostringstream os;
  write_csv(os, EmpiricalMeasure::weighted(p, w));
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "weight,x_1,x_2");
  std::getline(is, line);
  EXPECT_EQ(line, "0.25,0.10000000000000001,0.33333333333333331");
}
