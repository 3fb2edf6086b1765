#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "filterstab/core.hpp"
#include "filterstab/rng.hpp"

namespace filterstab::l96 {

inline constexpr double kDivergenceBound = 1e6;
inline constexpr long kSpinUpIterations = 100000;

struct ModelConfig {
  int d = 10;
  double F = 10.0;
  double g = 0.05;   // observation gap
  double dt = 0.01;  // RK4 step

  /// Number of RK4 steps covering `t`; throws if t is not a multiple of dt.
  long steps_for(double t) const {
    require(t >= 0.0 && std::isfinite(t), ErrorKind::config, "integration time must be finite and >= 0");
    const double ratio = t / dt;
    const double steps = std::round(ratio);
    if (std::abs(steps * dt - t) > 1e-12 * std::max(t, dt))
      throw Error(ErrorKind::config, "time " + std::to_string(t) + " is not a multiple of dt " + std::to_string(dt));
    return static_cast<long>(steps);
  }

  void validate() const {
    require(d >= 4, ErrorKind::config, "Lorenz-96 needs d >= 4");
    require(std::isfinite(F), ErrorKind::config, "forcing must be finite");
    require(dt > 0.0 && std::isfinite(dt), ErrorKind::config, "dt must be > 0");
    require(g > 0.0 && std::isfinite(g), ErrorKind::config, "observation gap g must be > 0");
    steps_for(g);
  }
};

/// dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F, indices cyclic.
inline void rhs_into(const Eigen::Ref<const Eigen::VectorXd>& x, double F, Eigen::Ref<Eigen::VectorXd> out) {
  const Eigen::Index d = x.size();
  for (Eigen::Index i = 0; i < d; ++i) {
    const double xp1 = x[(i + 1) % d];
    const double xm1 = x[(i + d - 1) % d];
    const double xm2 = x[(i + d - 2) % d];
    out[i] = (xp1 - xm2) * xm1 - x[i] + F;
  }
}

inline StateVector l96_rhs(const StateVector& x, double F) {
  require(x.size() >= 4, ErrorKind::validation, "Lorenz-96 state needs at least 4 components");
  require(x.allFinite(), ErrorKind::invalid_state, "non-finite entry in Lorenz-96 state");
  StateVector out(x.size());
  rhs_into(x, F, out);
  return out;
}

/// Fixed-step RK4 integration, in place. `steps` RK4 steps of size dt.
inline void integrate_in_place(Eigen::Ref<Eigen::VectorXd> x, long steps, double dt, double F) {
  const Eigen::Index d = x.size();
  Eigen::VectorXd k1(d), k2(d), k3(d), k4(d), tmp(d);
  for (long s = 0; s < steps; ++s) {
    rhs_into(x, F, k1);
    tmp = x + 0.5 * dt * k1;
    rhs_into(tmp, F, k2);
    tmp = x + 0.5 * dt * k2;
    rhs_into(tmp, F, k3);
    tmp = x + dt * k3;
    rhs_into(tmp, F, k4);
    x += (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  if (!(x.array().abs() <= kDivergenceBound).all())
    throw Error(ErrorKind::divergence, "Lorenz-96 state left |x_i| <= 1e6 (or became non-finite)");
}

/// phi(t, x0): the deterministic flow map.
inline StateVector flow(const StateVector& x0, double t, const ModelConfig& cfg) {
  require(x0.size() == cfg.d, ErrorKind::validation, "state dimension does not match model");
  require(x0.allFinite(), ErrorKind::invalid_state, "non-finite entry in initial state");
  const long steps = cfg.steps_for(t);
  StateVector x = x0;
  if (steps > 0) integrate_in_place(x, steps, cfg.dt, cfg.F);
  return x;
}

/// Moves a standard-normal draw onto the attractor by iterating f_g.
inline StateVector spin_up(Seed seed, const ModelConfig& cfg, long iterations = kSpinUpIterations) {
  cfg.validate();
  Engine eng = make_engine(seed);
  StateVector x(cfg.d);
  fill_standard_normal(eng, x);
  const long per_gap = cfg.steps_for(cfg.g);
  for (long it = 0; it < iterations; ++it) integrate_in_place(x, per_gap, cfg.dt, cfg.F);
  return x;
}

struct Trajectory {
  std::vector<StateVector> states;
  std::vector<double> times;

  std::size_t size() const { return states.size(); }
};

inline Trajectory generate_truth(const StateVector& x0, int n, const ModelConfig& cfg) {
  cfg.validate();
  require(n >= 0, ErrorKind::validation, "number of steps must be >= 0");
  Trajectory traj;
  traj.states.reserve(static_cast<std::size_t>(n) + 1);
  traj.times.reserve(static_cast<std::size_t>(n) + 1);
  traj.states.push_back(x0);
  traj.times.push_back(0.0);
  for (int k = 1; k <= n; ++k) {
    traj.states.push_back(flow(traj.states.back(), cfg.g, cfg));
    traj.times.push_back(k * cfg.g);
  }
  return traj;
}

/// Linear observation of a subset of coordinates plus N(0, sigma2) noise.
/// Indices are 0-based internally; the alternate-coordinate model observes
/// x_1, x_3, ... in 1-based terms, i.e. {0, 2, 4, ...}.
struct ObservationModel {
  std::vector<int> observed_indices;
  double sigma2 = 0.4;

  static ObservationModel alternate(int d, double sigma2) {
    ObservationModel m;
    for (int j = 0; 2 * j < d; ++j) m.observed_indices.push_back(2 * j);
    m.sigma2 = sigma2;
    return m;
  }

  static ObservationModel full(int d, double sigma2) {
    ObservationModel m;
    for (int j = 0; j < d; ++j) m.observed_indices.push_back(j);
    m.sigma2 = sigma2;
    return m;
  }

  int q() const { return static_cast<int>(observed_indices.size()); }

  Eigen::VectorXd project(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    Eigen::VectorXd y(q());
    for (int j = 0; j < q(); ++j) y[j] = x[observed_indices[static_cast<std::size_t>(j)]];
    return y;
  }

  Eigen::MatrixXd matrix(int d) const {
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(q(), d);
    for (int j = 0; j < q(); ++j) H(j, observed_indices[static_cast<std::size_t>(j)]) = 1.0;
    return H;
  }

  void validate(int d) const {
    require(sigma2 >= 0.0 && std::isfinite(sigma2), ErrorKind::config, "observation variance must be >= 0");
    require(!observed_indices.empty(), ErrorKind::config, "observation model observes nothing");
    for (int i : observed_indices)
      require(i >= 0 && i < d, ErrorKind::config, "observed index out of range");
  }
};

struct ObservationRecord {
  std::vector<Eigen::VectorXd> y;
  int realization_id = 0;
  Seed seed = 0;

  std::size_t size() const { return y.size(); }
};

inline ObservationRecord observe(const Trajectory& traj, const ObservationModel& obs, Seed seed,
                                 int realization_id = 0) {
  require(!traj.states.empty(), ErrorKind::validation, "empty trajectory");
  obs.validate(static_cast<int>(traj.states.front().size()));
  ObservationRecord rec;
  rec.realization_id = realization_id;
  rec.seed = seed;
  rec.y.reserve(traj.size());
  Engine eng = make_engine(seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double sd = std::sqrt(obs.sigma2);
  for (const auto& x : traj.states) {
    Eigen::VectorXd y = obs.project(x);
    for (Eigen::Index j = 0; j < y.size(); ++j) y[j] += sd * noise(eng);
    rec.y.push_back(std::move(y));
  }
  return rec;
}

namespace detail {

inline void write_rows(std::ostream& os, const char* prefix, const std::vector<Eigen::VectorXd>& rows,
                       const std::vector<double>& times) {
  const auto old_precision = os.precision(17);
  os << "time";
  const Eigen::Index width = rows.empty() ? 0 : rows.front().size();
  for (Eigen::Index i = 1; i <= width; ++i) os << ',' << prefix << '_' << i;
  os << '\n';
  for (std::size_t k = 0; k < rows.size(); ++k) {
    os << times[k];
    for (Eigen::Index i = 0; i < width; ++i) os << ',' << rows[k][i];
    os << '\n';
  }
  os.precision(old_precision);
}

}  // namespace detail

inline void write_csv(std::ostream& os, const Trajectory& traj) { detail::write_rows(os, "x", traj.states, traj.times); }

inline void write_csv(std::ostream& os, const ObservationRecord& rec, double g) {
  std::vector<double> times(rec.size());
  for (std::size_t k = 0; k < times.size(); ++k) times[k] = static_cast<double>(k) * g;
  detail::write_rows(os, "y", rec.y, times);
}

}  // namespace filterstab::l96
