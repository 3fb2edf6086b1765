#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "filterstab/core.hpp"
#include "filterstab/lorenz96.hpp"
#include "filterstab/measures.hpp"
#include "filterstab/propagate.hpp"
#include "filterstab/rng.hpp"

namespace filterstab::bpf {

struct BpfConfig {
  int N = 500;
  // Standard deviation of the offspring jitter; the jitter variance is 0.5.
  double jitter_sigma = 0.70710678118654752;

  void validate() const {
    require(N >= 2, ErrorKind::config, "particle filter needs N >= 2");
    require(jitter_sigma > 0.0 && std::isfinite(jitter_sigma), ErrorKind::config, "jitter_sigma must be > 0");
  }
};

/// log N(y; Hx, sigma2 I_q).
inline double log_likelihood(const Eigen::VectorXd& y, const Eigen::Ref<const Eigen::VectorXd>& x,
                             const l96::ObservationModel& obs) {
  require(obs.sigma2 > 0.0, ErrorKind::validation, "likelihood needs sigma2 > 0");
  require(y.size() == obs.q(), ErrorKind::validation, "observation dimension mismatch");
  double ss = 0.0;
  for (int j = 0; j < obs.q(); ++j) {
    const double r = y[j] - x[obs.observed_indices[static_cast<std::size_t>(j)]];
    ss += r * r;
  }
  return -0.5 * obs.q() * std::log(2.0 * std::numbers::pi * obs.sigma2) - ss / (2.0 * obs.sigma2);
}

/// exp(logw - max logw), normalized. Throws when no weight is finite.
inline Eigen::VectorXd normalize_log_weights(const Eigen::VectorXd& log_weights, const std::string& where = "") {
  const double top = log_weights.maxCoeff();
  if (!std::isfinite(top))
    throw Error(ErrorKind::degenerate_weights, "no finite log-weight" + (where.empty() ? "" : " at " + where));
  Eigen::VectorXd w = (log_weights.array() - top).exp().matrix();
  const double total = w.sum();
  if (!(total > 0.0) || !std::isfinite(total))
    throw Error(ErrorKind::degenerate_weights, "weights underflowed" + (where.empty() ? "" : " at " + where));
  return w / total;
}

struct Significant {
  std::vector<Eigen::Index> indices;  // 0-based, ascending
  std::vector<int> hits;              // sums to N
};

/// Systematic selection: particle i is significant when some
/// U_j = u + j/N (j = 0..N-1) falls in (C_{i-1}, C_i] of the cumulative weights.
inline Significant significant_particles(const Eigen::VectorXd& weights, double u) {
  const Eigen::Index n = weights.size();
  require(n >= 1, ErrorKind::validation, "no weights");
  require(u >= 0.0 && u < 1.0 / static_cast<double>(n), ErrorKind::validation, "u must lie in [0, 1/N)");

  Eigen::VectorXd cum(n);
  double running = 0.0;
  Eigen::Index last_positive = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    running += weights[i];
    cum[i] = running;
    if (weights[i] > 0.0) last_positive = i;
  }
  // Rounding in the running sum must not leave U_N outside the last interval.
  for (Eigen::Index i = last_positive; i < n; ++i) cum[i] = 1.0;

  Significant out;
  Eigen::Index i = 0;
  for (Eigen::Index j = 0; j < n; ++j) {
    const double U = u + static_cast<double>(j) / static_cast<double>(n);
    // Half-open (C_{i-1}, C_i]: U == C_{i-1} belongs to particle i-1. A U of
    // exactly 0 (u == 0) goes to the first particle with positive weight.
    while (i < n - 1 && (U > cum[i] || weights[i] <= 0.0)) ++i;
    if (out.indices.empty() || out.indices.back() != i) {
      out.indices.push_back(i);
      out.hits.push_back(0);
    }
    ++out.hits.back();
  }
  return out;
}

/// Largest-remainder apportionment of N offspring proportional to weights,
/// with every entry >= 1.
inline std::vector<int> allocate_offspring(const std::vector<double>& sig_weights, int N) {
  const auto m = static_cast<int>(sig_weights.size());
  require(m >= 1, ErrorKind::validation, "no significant particles");
  if (m > N) throw Error(ErrorKind::validation, "more significant particles than offspring slots");
  double total = 0.0;
  for (double w : sig_weights) {
    require(w > 0.0 && std::isfinite(w), ErrorKind::validation, "significant weights must be positive");
    total += w;
  }

  std::vector<int> counts(static_cast<std::size_t>(m));
  std::vector<double> remainder(static_cast<std::size_t>(m));
  int assigned = 0;
  for (int j = 0; j < m; ++j) {
    const double quota = N * sig_weights[static_cast<std::size_t>(j)] / total;
    counts[static_cast<std::size_t>(j)] = static_cast<int>(std::floor(quota));
    remainder[static_cast<std::size_t>(j)] = quota - std::floor(quota);
    assigned += counts[static_cast<std::size_t>(j)];
  }
  std::vector<int> order(static_cast<std::size_t>(m));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return remainder[static_cast<std::size_t>(a)] > remainder[static_cast<std::size_t>(b)];
  });
  for (int r = 0; assigned < N; r = (r + 1) % m, ++assigned) ++counts[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])];

  for (auto& c : counts) {
    if (c >= 1) continue;
    auto donor = std::max_element(counts.begin(), counts.end());
    --*donor;
    c = 1;
  }
  return counts;
}

/// Keeps each significant particle once and adds counts[j] - 1 draws from
/// N(particle_j, jitter_sigma^2 I). Significant particles come first.
inline EmpiricalMeasure resample_with_jitter(const PointMatrix& significant, const std::vector<int>& counts,
                                             double jitter_sigma, Engine& eng) {
  require(static_cast<std::size_t>(significant.rows()) == counts.size(), ErrorKind::validation,
          "one count per significant particle required");
  int total = 0;
  for (int c : counts) {
    require(c >= 1, ErrorKind::validation, "offspring counts must be >= 1");
    total += c;
  }
  const Eigen::Index d = significant.cols();
  PointMatrix out(total, d);
  out.topRows(significant.rows()) = significant;
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::Index row = significant.rows();
  for (std::size_t j = 0; j < counts.size(); ++j) {
    for (int c = 1; c < counts[j]; ++c, ++row)
      for (Eigen::Index k = 0; k < d; ++k)
        out(row, k) = significant(static_cast<Eigen::Index>(j), k) + jitter_sigma * normal(eng);
  }
  return EmpiricalMeasure::uniform(std::move(out));
}

/// Weighting and offspring resampling for one assimilation time.
inline EmpiricalMeasure reweight_and_resample(const PointMatrix& particles, const Eigen::VectorXd& log_weights,
                                              double jitter_sigma, Engine& eng, const std::string& where = "") {
  const Eigen::VectorXd w = normalize_log_weights(log_weights, where);
  const auto n = particles.rows();
  std::uniform_real_distribution<double> unif(0.0, 1.0 / static_cast<double>(n));
  const double u = unif(eng);
  const Significant sig = significant_particles(w, u);

  PointMatrix chosen(static_cast<Eigen::Index>(sig.indices.size()), particles.cols());
  for (std::size_t j = 0; j < sig.indices.size(); ++j) chosen.row(static_cast<Eigen::Index>(j)) = particles.row(sig.indices[j]);
  // Hit counts are the offspring numbers; they already sum to N.
  return resample_with_jitter(chosen, sig.hits, jitter_sigma, eng);
}

template <class Propagate>
class BootstrapParticleFilter {
 public:
  BootstrapParticleFilter(const GaussianSpec& init, const l96::ObservationModel& obs, const BpfConfig& pcfg,
                          Propagate propagate, Seed seed)
      : obs_(obs), pcfg_(pcfg), propagate_(std::move(propagate)), eng_(make_engine(derive_seed(seed, "bpf/resample", 0))) {
    pcfg_.validate();
    obs_.validate(static_cast<int>(init.mean.size()));
    require(obs_.sigma2 > 0.0, ErrorKind::config, "particle filter needs sigma2 > 0");
    current_ = sample_gaussian(init, pcfg_.N, derive_seed(seed, "bpf/init", 0));
  }

  const EmpiricalMeasure& current() const { return current_; }
  int step_index() const { return k_; }

  /// k = 0: weight and resample the initial sample. k > 0: propagate first.
  const EmpiricalMeasure& step(const Eigen::VectorXd& y) {
    PointMatrix X = current_.points();
    if (k_ > 0) propagate_rows(X, propagate_);
    Eigen::VectorXd logw(X.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i) logw[i] = log_likelihood(y, X.row(i).transpose(), obs_);
    current_ = reweight_and_resample(X, logw, pcfg_.jitter_sigma, eng_, "step " + std::to_string(k_));
    ++k_;
    return current_;
  }

 private:
  l96::ObservationModel obs_;
  BpfConfig pcfg_;
  Propagate propagate_;
  Engine eng_;
  EmpiricalMeasure current_;
  int k_ = 0;
};

template <class Propagate>
std::vector<EmpiricalMeasure> bpf_run(const GaussianSpec& init, const l96::ObservationRecord& obsrec,
                                      const l96::ObservationModel& obs, Propagate propagate, const BpfConfig& pcfg,
                                      Seed seed) {
  require(!obsrec.y.empty(), ErrorKind::validation, "observation record is empty");
  BootstrapParticleFilter<Propagate> filter(init, obs, pcfg, std::move(propagate), seed);
  std::vector<EmpiricalMeasure> out;
  out.reserve(obsrec.size());
  for (const auto& y : obsrec.y) out.push_back(filter.step(y));
  return out;
}

inline std::vector<EmpiricalMeasure> bpf_run(const GaussianSpec& init, const l96::ObservationRecord& obsrec,
                                             const l96::ObservationModel& obs, const l96::ModelConfig& cfg,
                                             const BpfConfig& pcfg, Seed seed) {
  require(init.mean.size() == cfg.d, ErrorKind::validation, "initial mean dimension does not match model");
  return bpf_run(init, obsrec, obs, L96Propagator(cfg), pcfg, seed);
}

}  // namespace filterstab::bpf
