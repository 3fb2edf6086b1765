#include <chrono>
#include <cmath>

#include <gtest/gtest.h>

#include "filterstab/sinkhorn.hpp"
#include "test_util.hpp"

using namespace filterstab;
using namespace filterstab::sinkhorn;

namespace {

PointMatrix uniform_cube(Eigen::Index n, Eigen::Index d, Engine& eng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  PointMatrix p(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) p(i, j) = unif(eng);
  return p;
}

EmpiricalMeasure atom(std::initializer_list<double> x) {
  PointMatrix p(1, static_cast<Eigen::Index>(x.size()));
  Eigen::Index j = 0;
  for (double v : x) p(0, j++) = v;
  return EmpiricalMeasure::uniform(p);
}

// Small-epsilon instances can converge sublinearly for 10^5+ iterations, so
// the tolerance is chosen per use rather than fixed at the rounding floor.
SinkhornConfig tight(double eps, double rel_tol = 1e-12) {
  SinkhornConfig c;
  c.epsilon = eps;
  c.rel_tol = rel_tol;
  c.max_iter = 2000000;
  return c;
}

// Entropic OT by matrix scaling on the primal coupling:
// min <C, P> + eps KL(P | mu x nu) over couplings P.
double primal_entropic_ot(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu, double eps) {
  const auto n = mu.size(), m = nu.size();
  Eigen::MatrixXd C(n, m), K(n, m);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < m; ++j) {
      C(i, j) = (mu.points().row(i) - nu.points().row(j)).squaredNorm();
      K(i, j) = std::exp(-C(i, j) / eps) * mu.weights()[i] * nu.weights()[j];
    }
  Eigen::VectorXd u = Eigen::VectorXd::Ones(n), v = Eigen::VectorXd::Ones(m);
  for (int it = 0; it < 1000000; ++it) {
    u = mu.weights().cwiseQuotient(K * v);
    v = nu.weights().cwiseQuotient(K.transpose() * u);
    const Eigen::MatrixXd P = u.asDiagonal() * K * v.asDiagonal();
    if ((P.rowwise().sum() - mu.weights()).lpNorm<1>() < 1e-12) break;
  }
  const Eigen::MatrixXd P = u.asDiagonal() * K * v.asDiagonal();
  double value = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < m; ++j)
      if (P(i, j) > 0.0)
        value += P(i, j) * C(i, j) + eps * P(i, j) * std::log(P(i, j) / (mu.weights()[i] * nu.weights()[j]));
  return value;
}

}  // namespace

TEST(CostMatrix, HandCasesAndSymmetry) {
  const auto C = cost_matrix(atom({0.0}), atom({3.0}));
  EXPECT_DOUBLE_EQ(C(0, 0), 9.0);
  Engine eng = make_engine(1);
  const PointMatrix x = uniform_cube(5, 3, eng), y = uniform_cube(4, 3, eng);
  const RowMatrix a = cost_matrix(x, y), b = cost_matrix(y, x);
  EXPECT_EQ(a, RowMatrix(b.transpose()));
  const RowMatrix self = cost_matrix(x, x);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(self(i, i), 0.0);
  EXPECT_ERROR_KIND(cost_matrix(uniform_cube(2, 2, eng), uniform_cube(2, 3, eng)), ErrorKind::validation);
}

TEST(OtDual, SingleAtoms) {
  EXPECT_DOUBLE_EQ(ot_dual(atom({1, 2}), atom({1, 2}), SinkhornConfig{}).value, 0.0);
  for (double eps : {1.0, 0.01, 0.001}) {
    SinkhornConfig c;
    c.epsilon = eps;
    EXPECT_NEAR(ot_dual(atom({0, 0}), atom({3, 4}), c).value, 25.0, 1e-9);
    EXPECT_NEAR(sinkhorn_divergence(atom({0, 0}), atom({3, 4}), c), 25.0, 1e-9);
    EXPECT_NEAR(d_eps(atom({0, 0}), atom({3, 4}), c), 5.0, 1e-9);
  }
}

TEST(OtDual, MatchesPrimalMatrixScaling) {
  Engine eng = make_engine(2);
  for (int trial = 0; trial < 10; ++trial) {
    const auto mu = EmpiricalMeasure::uniform(uniform_cube(3, 2, eng));
    const auto nu = EmpiricalMeasure::uniform(uniform_cube(3, 2, eng));
    const double primal = primal_entropic_ot(mu, nu, 0.01);
    // The default stopping rule (relative change 1e-3) bounds the accuracy.
    EXPECT_NEAR(ot_dual(mu, nu, SinkhornConfig{}).value, primal, 1e-3 * primal) << "trial " << trial;
    EXPECT_NEAR(ot_dual(mu, nu, tight(0.1)).value, primal_entropic_ot(mu, nu, 0.1), 1e-10) << "trial " << trial;
  }
}

TEST(OtDual, NonConvergenceCarriesLastError) {
  Engine eng = make_engine(3);
  const auto mu = EmpiricalMeasure::uniform(uniform_cube(20, 3, eng));
  const auto nu = EmpiricalMeasure::uniform(uniform_cube(20, 3, eng));
  SinkhornConfig c;
  c.epsilon = 0.001;
  c.rel_tol = 1e-12;
  c.max_iter = 3;
  try {
    ot_dual(mu, nu, c);
    FAIL() << "expected non-convergence";
  } catch (const NonConvergenceError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::non_convergence);
    EXPECT_GT(e.last_relative_error(), 1e-12);
  }
}

TEST(OtDual, ConfigValidation) {
  SinkhornConfig c;
  c.epsilon = 0.0;
  EXPECT_ERROR_KIND(ot_dual(atom({0}), atom({1}), c), ErrorKind::config);
  c = SinkhornConfig{};
  c.rel_tol = 1.0;
  EXPECT_ERROR_KIND(ot_dual(atom({0}), atom({1}), c), ErrorKind::config);
}

TEST(OtDual, ZeroWeightAtomsAreIgnored) {
  Engine eng = make_engine(4);
  PointMatrix x = uniform_cube(6, 2, eng);
  const PointMatrix y = uniform_cube(5, 2, eng);
  Eigen::VectorXd w = Eigen::VectorXd::Constant(6, 1.0);
  w[2] = 0.0;
  x(2, 0) = 50.0;  // far away, would dominate if it took part
  PointMatrix kept(5, 2);
  for (int i = 0, r = 0; i < 6; ++i)
    if (i != 2) kept.row(r++) = x.row(i);
  const auto with_zero = EmpiricalMeasure::weighted(x, w);
  const auto without = EmpiricalMeasure::uniform(kept);
  const auto nu = EmpiricalMeasure::uniform(y);
  const auto c = tight(0.01, 1e-6);
  const auto r = ot_dual(with_zero, nu, c);
  EXPECT_NEAR(r.value, ot_dual(without, nu, c).value, 1e-12);
  EXPECT_EQ(r.potentials.a.size(), 6);
  EXPECT_TRUE(r.potentials.a.allFinite());
  EXPECT_NEAR(sinkhorn_divergence(with_zero, nu, c), sinkhorn_divergence(without, nu, c), 1e-10);
}

TEST(SymmetricPotential, SingleAtomAndCrossCheck) {
  const auto s = symmetric_potential(atom({4, 4}), SinkhornConfig{});
  EXPECT_EQ(s.a.size(), 1);
  EXPECT_NEAR(s.a[0], 0.0, 1e-15);
  EXPECT_NEAR(s.value, 0.0, 1e-15);

  Engine eng = make_engine(5);
  for (double eps : {1.0, 0.1, 0.01}) {
    const auto mu = EmpiricalMeasure::uniform(uniform_cube(12, 2, eng));
    EXPECT_NEAR(symmetric_potential(mu, tight(eps)).value, ot_dual(mu, mu, tight(eps)).value, 1e-6) << eps;
  }
}

TEST(SymmetricPotential, DuplicateAtomSplitInvariance) {
  Engine eng = make_engine(6);
  const PointMatrix x = uniform_cube(5, 3, eng);
  PointMatrix split(6, 3);
  split.topRows(5) = x;
  split.row(5) = x.row(1);
  Eigen::VectorXd w = Eigen::VectorXd::Constant(6, 0.2);
  w[1] = 0.1;
  w[5] = 0.1;
  for (double eps : {1.0, 0.01}) {
    const double a = symmetric_potential(EmpiricalMeasure::uniform(x), tight(eps)).value;
    const double b = symmetric_potential(EmpiricalMeasure::weighted(split, w), tight(eps)).value;
    EXPECT_NEAR(a, b, 1e-8) << eps;
  }
}

TEST(SinkhornDivergence, IdentityAndSymmetry) {
  Engine eng = make_engine(7);
  const auto mu = EmpiricalMeasure::uniform(uniform_cube(15, 3, eng));
  const auto nu = EmpiricalMeasure::uniform(uniform_cube(11, 3, eng));
  EXPECT_NEAR(sinkhorn_divergence(mu, mu, SinkhornConfig{}), 0.0, 1e-8);
  EXPECT_EQ(d_eps(mu, mu, SinkhornConfig{}), 0.0);
  const auto c = tight(0.05);
  EXPECT_NEAR(sinkhorn_divergence(mu, nu, c), sinkhorn_divergence(nu, mu, c), 1e-8);
  EXPECT_GE(sinkhorn_divergence(mu, nu, c), -1e-6);
}

TEST(SinkhornDivergence, TranslationCovariance) {
  Engine eng = make_engine(8);
  const PointMatrix x = uniform_cube(10, 3, eng), y = uniform_cube(10, 3, eng);
  const Eigen::RowVector3d shift(5.0, -2.0, 0.25);
  const auto c = tight(0.05);
  const double base = sinkhorn_divergence(EmpiricalMeasure::uniform(x), EmpiricalMeasure::uniform(y), c);
  const double moved = sinkhorn_divergence(EmpiricalMeasure::uniform(PointMatrix(x.rowwise() + shift)),
                                           EmpiricalMeasure::uniform(PointMatrix(y.rowwise() + shift)), c);
  EXPECT_LT(std::abs(base - moved), 1e-8);
}

TEST(SinkhornDivergence, ScalingWithEpsilon) {
  Engine eng = make_engine(9);
  const PointMatrix x = uniform_cube(6, 2, eng), y = uniform_cube(6, 2, eng);
  const double s = 3.0;
  SinkhornConfig c;
  c.epsilon = 0.01;
  SinkhornConfig cs = c;
  cs.epsilon = c.epsilon * s * s;
  const auto mu = EmpiricalMeasure::uniform(x), nu = EmpiricalMeasure::uniform(y);
  const auto smu = EmpiricalMeasure::uniform(PointMatrix(s * x)), snu = EmpiricalMeasure::uniform(PointMatrix(s * y));
  EXPECT_NEAR(w2_exact_small(smu, snu), s * w2_exact_small(mu, nu), 1e-12);
  EXPECT_NEAR(d_eps(smu, snu, cs), s * d_eps(mu, nu, c), 1e-6);
}

TEST(SinkhornDivergence, FivePointInstanceNearExactW2) {
  Engine eng = make_engine(10);
  SinkhornConfig c;
  c.epsilon = 0.001;
  for (int trial = 0; trial < 5; ++trial) {
    const auto mu = EmpiricalMeasure::uniform(uniform_cube(5, 2, eng));
    const auto nu = EmpiricalMeasure::uniform(uniform_cube(5, 2, eng));
    const double w2 = w2_exact_small(mu, nu);
    EXPECT_NEAR(d_eps(mu, nu, c), w2, 0.02 * w2) << "trial " << trial;
  }
}

TEST(SinkhornDivergence, OracleAgreementOnFiftyInstances) {
  Engine eng = make_engine(11);
  SinkhornConfig c;
  c.epsilon = 1e-3;
  const auto start = std::chrono::steady_clock::now();
  for (int trial = 0; trial < 50; ++trial) {
    const auto mu = EmpiricalMeasure::uniform(uniform_cube(6, 3, eng));
    const auto nu = EmpiricalMeasure::uniform(uniform_cube(6, 3, eng));
    const double w2 = w2_exact_small(mu, nu);
    EXPECT_LE(std::abs(d_eps(mu, nu, c) - w2), 0.02 * w2 + 0.005) << "trial " << trial;
  }
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 10.0);
}

TEST(SinkhornDivergence, ShrinkingEpsilonApproachesW2) {
  Engine eng = make_engine(12);
  const auto mu = EmpiricalMeasure::uniform(uniform_cube(6, 2, eng));
  const auto nu = EmpiricalMeasure::uniform(uniform_cube(6, 2, eng));
  const double w2 = w2_exact_small(mu, nu);
  double prev_gap = std::numeric_limits<double>::infinity();
  for (double eps : {1.0, 0.1, 0.01}) {
    const double gap = std::abs(d_eps(mu, nu, tight(eps, 1e-8)) - w2);
    EXPECT_LT(gap, prev_gap) << eps;
    prev_gap = gap;
  }
}

TEST(SinkhornDivergence, ReportFlagsOnlyMeaningfulNegatives) {
  DivergenceReport r;
  r.s_eps = -1e-7;
  EXPECT_FALSE(r.suspicious_negative());
  r.s_eps = -1e-5;
  EXPECT_TRUE(r.suspicious_negative());
}

TEST(TruncatedSoftmin, MatchesDenseRows) {
  Engine eng = make_engine(13);
  std::normal_distribution<double> normal;
  const PointMatrix x = uniform_cube(60, 4, eng), y = uniform_cube(50, 4, eng);
  for (double eps : {1.0, 0.01, 0.001}) {
    const RowMatrix G = cost_matrix(x, y) * (-1.0 / eps);
    sinkhorn::detail::TruncatedSoftmin fast(G);
    Eigen::RowVectorXd h = Eigen::RowVectorXd::Constant(50, std::log(1.0 / 50));
    Eigen::VectorXd dense, trunc;
    for (int it = 0; it < 40; ++it) {
      // Mix small drifts (reuse of the kept columns) with occasional jumps (refresh).
      for (auto& v : h) v += (it % 10 == 9 ? 15.0 : 0.3) * normal(eng);
      sinkhorn::detail::softmin_rows(G, h, eps, dense);
      fast(h, eps, trunc);
      EXPECT_LE((dense - trunc).cwiseAbs().maxCoeff(), 1e-12 * (1.0 + dense.cwiseAbs().maxCoeff()))
          << "eps " << eps << " iteration " << it;
    }
  }
}

TEST(W2ExactSmall, HandCasesAndErrors) {
  PointMatrix a(2, 1), b(2, 1), c(2, 1);
  a << 0, 1;
  b << 1, 0;
  EXPECT_DOUBLE_EQ(w2_exact_small(EmpiricalMeasure::uniform(a), EmpiricalMeasure::uniform(b)), 0.0);
  a << 0, 2;
  c << 1, 3;
  EXPECT_DOUBLE_EQ(w2_exact_small(EmpiricalMeasure::uniform(a), EmpiricalMeasure::uniform(c)), 1.0);
  EXPECT_DOUBLE_EQ(w2_exact_small(EmpiricalMeasure::uniform(a), EmpiricalMeasure::uniform(a)), 0.0);

  Engine eng = make_engine(14);
  EXPECT_ERROR_KIND(w2_exact_small(EmpiricalMeasure::uniform(uniform_cube(3, 1, eng)),
                                   EmpiricalMeasure::uniform(uniform_cube(4, 1, eng))),
                    ErrorKind::unsupported_instance);
  EXPECT_ERROR_KIND(w2_exact_small(EmpiricalMeasure::uniform(uniform_cube(9, 1, eng)),
                                   EmpiricalMeasure::uniform(uniform_cube(9, 1, eng))),
                    ErrorKind::unsupported_instance);
  Eigen::VectorXd w(3);
  w << 1, 2, 3;
  EXPECT_ERROR_KIND(w2_exact_small(EmpiricalMeasure::weighted(uniform_cube(3, 1, eng), w),
                                   EmpiricalMeasure::uniform(uniform_cube(3, 1, eng))),
                    ErrorKind::unsupported_instance);
}
