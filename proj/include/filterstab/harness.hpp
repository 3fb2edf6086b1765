#pragma once

#include <cmath>
#include <cstdio>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "filterstab/bpf.hpp"
#include "filterstab/core.hpp"
#include "filterstab/enkf.hpp"
#include "filterstab/lorenz96.hpp"
#include "filterstab/measures.hpp"
#include "filterstab/metrics.hpp"
#include "filterstab/parallel.hpp"
#include "filterstab/propagate.hpp"
#include "filterstab/rng.hpp"
#include "filterstab/sinkhorn.hpp"

namespace filterstab::harness {

enum class FilterKind { enkf, bpf };

inline const char* to_string(FilterKind k) { return k == FilterKind::enkf ? "enkf" : "bpf"; }

inline FilterKind parse_filter(const std::string& s) {
  if (s == "enkf") return FilterKind::enkf;
  if (s == "bpf" || s == "pf") return FilterKind::bpf;
  throw Error(ErrorKind::config, "unknown filter '" + s + "' (expected enkf or bpf)");
}

/// Isotropic Gaussian around x0_true + offset * 1_d.
struct InitSpec {
  double offset = 0.0;
  double variance = 1.0;

  GaussianSpec around(const StateVector& x0) const {
    return GaussianSpec{(x0.array() + offset).matrix(), variance};
  }
};

struct ExperimentConfig {
  l96::ModelConfig model;
  double sigma2 = 0.4;
  enkf::EnkfConfig enkf;
  bpf::BpfConfig bpf;
  std::optional<int> n_steps;  // default: round(time_horizon / g) per slice
  double time_horizon = 10.0;
  int n_realizations = 10;
  sinkhorn::SinkhornConfig sinkhorn;
  InitSpec init_unbiased{0.0, 0.1};
  InitSpec init_biased{4.0, 1.0};
  Seed master_seed = 20240601;
  std::optional<Seed> truth_seed;
  long spinup_iterations = l96::kSpinUpIterations;
  bool share_filter_seeds = false;
  double fit_start_time = 0.0;
  std::vector<FilterKind> filters{FilterKind::enkf, FilterKind::bpf};
  std::vector<double> sweep_g;
  std::vector<double> sweep_sigma2;
  std::vector<double> sweep_epsilon;
  std::vector<int> sweep_n_realizations;

  int steps_for(double g) const {
    if (n_steps) return *n_steps;
    return static_cast<int>(std::lround(time_horizon / g));
  }

  std::vector<double> g_values() const { return sweep_g.empty() ? std::vector<double>{model.g} : sweep_g; }
  std::vector<double> sigma2_values() const {
    return sweep_sigma2.empty() ? std::vector<double>{sigma2} : sweep_sigma2;
  }
  std::vector<double> epsilon_values() const {
    return sweep_epsilon.empty() ? std::vector<double>{sinkhorn.epsilon} : sweep_epsilon;
  }
  std::vector<int> realization_counts() const {
    return sweep_n_realizations.empty() ? std::vector<int>{n_realizations} : sweep_n_realizations;
  }

  void validate() const {
    model.validate();
    require(sigma2 > 0.0, ErrorKind::config, "sigma2 must be > 0");
    enkf.validate();
    bpf.validate();
    sinkhorn.validate();
    require(!n_steps || *n_steps >= 0, ErrorKind::config, "n_steps must be >= 0");
    require(time_horizon >= 0.0, ErrorKind::config, "time_horizon must be >= 0");
    require(n_realizations >= 1, ErrorKind::config, "n_realizations must be >= 1");
    require(init_unbiased.variance > 0.0 && init_biased.variance > 0.0, ErrorKind::config,
            "initial variances must be > 0");
    require(spinup_iterations >= 0, ErrorKind::config, "spinup_iterations must be >= 0");
    require(!filters.empty(), ErrorKind::config, "no filters selected");
    for (double g : sweep_g) {
      l96::ModelConfig m = model;
      m.g = g;
      m.validate();
    }
    for (double s : sweep_sigma2) require(s > 0.0, ErrorKind::config, "sweep sigma2 values must be > 0");
    for (double e : sweep_epsilon) require(e > 0.0, ErrorKind::config, "sweep epsilon values must be > 0");
    for (int r : sweep_n_realizations) require(r >= 1, ErrorKind::config, "sweep realization counts must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Config file: one flat JSON object, typed keys, unknown keys rejected.

namespace detail {

template <class T>
T get_typed(const nlohmann::json& j, const std::string& key) {
  const auto& v = j.at(key);
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw Error(ErrorKind::config, "key '" + key + "' must be a boolean");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw Error(ErrorKind::config, "key '" + key + "' must be an integer");
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw Error(ErrorKind::config, "key '" + key + "' must be a number");
  }
  return v.get<T>();
}

template <class T>
std::vector<T> get_list(const nlohmann::json& j, const std::string& key) {
  const auto& v = j.at(key);
  if (!v.is_array() || v.empty()) throw Error(ErrorKind::config, "key '" + key + "' must be a nonempty list");
  std::vector<T> out;
  for (const auto& e : v) {
    if constexpr (std::is_integral_v<T>) {
      if (!e.is_number_integer()) throw Error(ErrorKind::config, "list '" + key + "' must hold integers");
    } else {
      if (!e.is_number()) throw Error(ErrorKind::config, "list '" + key + "' must hold numbers");
    }
    out.push_back(e.get<T>());
  }
  return out;
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorKind::config, "config must be a JSON object");
  static const std::set<std::string> known{
      "d", "F", "g", "dt", "sigma2", "enkf_N", "localization_radius", "bpf_N", "jitter_sigma", "n_steps",
      "time_horizon", "n_realizations", "epsilon", "sinkhorn_rel_tol", "sinkhorn_max_iter", "unbiased_offset",
      "unbiased_variance", "biased_offset", "biased_variance", "master_seed", "truth_seed", "spinup_iterations",
      "share_filter_seeds", "fit_start_time", "filters", "sweep_g", "sweep_sigma2", "sweep_epsilon",
      "sweep_n_realizations"};
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw Error(ErrorKind::config, "unknown config key '" + key + "'");

  using detail::get_list;
  using detail::get_typed;
  ExperimentConfig c;
  if (j.contains("d")) c.model.d = get_typed<int>(j, "d");
  if (j.contains("F")) c.model.F = get_typed<double>(j, "F");
  if (j.contains("g")) c.model.g = get_typed<double>(j, "g");
  if (j.contains("dt")) c.model.dt = get_typed<double>(j, "dt");
  if (j.contains("sigma2")) c.sigma2 = get_typed<double>(j, "sigma2");
  if (j.contains("enkf_N")) c.enkf.N = get_typed<int>(j, "enkf_N");
  if (j.contains("localization_radius")) c.enkf.localization_radius = get_typed<double>(j, "localization_radius");
  if (j.contains("bpf_N")) c.bpf.N = get_typed<int>(j, "bpf_N");
  if (j.contains("jitter_sigma")) c.bpf.jitter_sigma = get_typed<double>(j, "jitter_sigma");
  if (j.contains("n_steps")) c.n_steps = get_typed<int>(j, "n_steps");
  if (j.contains("time_horizon")) c.time_horizon = get_typed<double>(j, "time_horizon");
  if (j.contains("n_realizations")) c.n_realizations = get_typed<int>(j, "n_realizations");
  if (j.contains("epsilon")) c.sinkhorn.epsilon = get_typed<double>(j, "epsilon");
  if (j.contains("sinkhorn_rel_tol")) c.sinkhorn.rel_tol = get_typed<double>(j, "sinkhorn_rel_tol");
  if (j.contains("sinkhorn_max_iter")) c.sinkhorn.max_iter = get_typed<int>(j, "sinkhorn_max_iter");
  if (j.contains("unbiased_offset")) c.init_unbiased.offset = get_typed<double>(j, "unbiased_offset");
  if (j.contains("unbiased_variance")) c.init_unbiased.variance = get_typed<double>(j, "unbiased_variance");
  if (j.contains("biased_offset")) c.init_biased.offset = get_typed<double>(j, "biased_offset");
  if (j.contains("biased_variance")) c.init_biased.variance = get_typed<double>(j, "biased_variance");
  if (j.contains("master_seed")) c.master_seed = get_typed<Seed>(j, "master_seed");
  if (j.contains("truth_seed")) c.truth_seed = get_typed<Seed>(j, "truth_seed");
  if (j.contains("spinup_iterations")) c.spinup_iterations = get_typed<long>(j, "spinup_iterations");
  if (j.contains("share_filter_seeds")) c.share_filter_seeds = get_typed<bool>(j, "share_filter_seeds");
  if (j.contains("fit_start_time")) c.fit_start_time = get_typed<double>(j, "fit_start_time");
  if (j.contains("filters")) {
    const auto& v = j.at("filters");
    if (!v.is_array() || v.empty()) throw Error(ErrorKind::config, "key 'filters' must be a nonempty list");
    c.filters.clear();
    for (const auto& e : v) {
      if (!e.is_string()) throw Error(ErrorKind::config, "list 'filters' must hold strings");
      c.filters.push_back(parse_filter(e.get<std::string>()));
    }
  }
  if (j.contains("sweep_g")) c.sweep_g = get_list<double>(j, "sweep_g");
  if (j.contains("sweep_sigma2")) c.sweep_sigma2 = get_list<double>(j, "sweep_sigma2");
  if (j.contains("sweep_epsilon")) c.sweep_epsilon = get_list<double>(j, "sweep_epsilon");
  if (j.contains("sweep_n_realizations")) c.sweep_n_realizations = get_list<int>(j, "sweep_n_realizations");
  c.validate();
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["d"] = c.model.d;
  j["F"] = c.model.F;
  j["g"] = c.model.g;
  j["dt"] = c.model.dt;
  j["sigma2"] = c.sigma2;
  j["enkf_N"] = c.enkf.N;
  j["localization_radius"] = c.enkf.localization_radius;
  j["bpf_N"] = c.bpf.N;
  j["jitter_sigma"] = c.bpf.jitter_sigma;
  if (c.n_steps) j["n_steps"] = *c.n_steps;
  j["time_horizon"] = c.time_horizon;
  j["n_realizations"] = c.n_realizations;
  j["epsilon"] = c.sinkhorn.epsilon;
  j["sinkhorn_rel_tol"] = c.sinkhorn.rel_tol;
  j["sinkhorn_max_iter"] = c.sinkhorn.max_iter;
  j["unbiased_offset"] = c.init_unbiased.offset;
  j["unbiased_variance"] = c.init_unbiased.variance;
  j["biased_offset"] = c.init_biased.offset;
  j["biased_variance"] = c.init_biased.variance;
  j["master_seed"] = c.master_seed;
  if (c.truth_seed) j["truth_seed"] = *c.truth_seed;
  j["spinup_iterations"] = c.spinup_iterations;
  j["share_filter_seeds"] = c.share_filter_seeds;
  j["fit_start_time"] = c.fit_start_time;
  j["filters"] = nlohmann::json::array();
  for (auto f : c.filters) j["filters"].push_back(to_string(f));
  if (!c.sweep_g.empty()) j["sweep_g"] = c.sweep_g;
  if (!c.sweep_sigma2.empty()) j["sweep_sigma2"] = c.sweep_sigma2;
  if (!c.sweep_epsilon.empty()) j["sweep_epsilon"] = c.sweep_epsilon;
  if (!c.sweep_n_realizations.empty()) j["sweep_n_realizations"] = c.sweep_n_realizations;
  return j;
}

inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(filterstab::detail::fnv1a(config_to_json(c).dump())));
  return buf;
}

// ---------------------------------------------------------------------------
// Seeds

inline Seed truth_seed(const ExperimentConfig& c) { return c.truth_seed.value_or(derive_seed(c.master_seed, "truth", 0)); }

inline Seed observation_seed(const ExperimentConfig& c, int realization) {
  return derive_seed(c.master_seed, "observations", static_cast<std::uint64_t>(realization));
}

inline Seed filter_seed(const ExperimentConfig& c, FilterKind kind, bool biased, int realization) {
  const std::string role = std::string("filter/") + to_string(kind) +
                           ((biased && !c.share_filter_seeds) ? "/biased" : "/unbiased");
  return derive_seed(c.master_seed, role, static_cast<std::uint64_t>(realization));
}

/// x_0^true: one spin-up with the base model, shared by every slice.
inline StateVector spin_up_truth(const ExperimentConfig& c) {
  return l96::spin_up(truth_seed(c), c.model, c.spinup_iterations);
}

// ---------------------------------------------------------------------------
// Slices

struct EpsilonResult {
  double epsilon = 0.0;
  metrics::DivergenceSeries divergence;
  metrics::FitResult fit;
  std::optional<metrics::CorrelationSummary> correlation;
  std::string correlation_error;
};

struct Provenance {
  std::string config_hash;
  Seed master_seed = 0;
  Seed truth_seed = 0;
  std::vector<Seed> observation_seeds;
  std::vector<Seed> filter_seeds_unbiased;
  std::vector<Seed> filter_seeds_biased;
};

struct SliceResult {
  FilterKind filter = FilterKind::enkf;
  double g = 0.0;
  double sigma2 = 0.0;
  int n_realizations = 0;
  int n_steps = 0;
  std::vector<EpsilonResult> per_epsilon;
  metrics::ErrorSeries errors_unbiased;
  metrics::ErrorSeries errors_biased;
  Provenance provenance;
  std::string error;  // nonempty when the slice failed
  ErrorKind error_kind = ErrorKind::numerical;

  bool failed() const { return !error.empty(); }

  const EpsilonResult& at_epsilon(double eps) const {
    for (const auto& e : per_epsilon)
      if (e.epsilon == eps) return e;
    throw Error(ErrorKind::validation, "slice has no results for epsilon " + std::to_string(eps));
  }
};

namespace detail {

struct RealizationTrace {
  std::vector<std::vector<double>> d_eps;  // [epsilon][step]
  std::vector<double> e2_u, e2_b, s2_u, s2_b;
  int negative_flags = 0;
};

template <class Filter>
RealizationTrace trace_pair(Filter& unbiased, Filter& biased, FilterKind kind, const l96::Trajectory& truth,
                            const l96::ObservationRecord& rec, const std::vector<sinkhorn::SinkhornConfig>& scfgs,
                            int realization) {
  RealizationTrace tr;
  const std::size_t steps = rec.size();
  tr.d_eps.assign(scfgs.size(), std::vector<double>(steps, 0.0));
  tr.e2_u.resize(steps);
  tr.e2_b.resize(steps);
  tr.s2_u.resize(steps);
  tr.s2_b.resize(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    // EnKF skips y_0; the particle filter assimilates it.
    if (kind == FilterKind::bpf || k > 0) {
      unbiased.step(rec.y[k]);
      biased.step(rec.y[k]);
    }
    const auto& mu = unbiased.current();
    const auto& nu = biased.current();
    const double eu = metrics::scaled_l2_error(mu, truth.states[k]);
    const double eb = metrics::scaled_l2_error(nu, truth.states[k]);
    const double su = metrics::ensemble_spread(mu);
    const double sb = metrics::ensemble_spread(nu);
    tr.e2_u[k] = eu * eu;
    tr.e2_b[k] = eb * eb;
    tr.s2_u[k] = su * su;
    tr.s2_b[k] = sb * sb;
    for (std::size_t e = 0; e < scfgs.size(); ++e) {
      try {
        const auto rep = sinkhorn::sinkhorn_divergence_report(mu, nu, scfgs[e]);
        if (rep.suspicious_negative()) ++tr.negative_flags;
        tr.d_eps[e][k] = std::sqrt(std::max(rep.s_eps, 0.0));
      } catch (const NonConvergenceError& err) {
        throw NonConvergenceError(std::string(err.what()) + " [realization " + std::to_string(realization) +
                                      ", step " + std::to_string(k) + "]",
                                  err.last_relative_error());
      }
    }
  }
  return tr;
}

}  // namespace detail

/// One (filter, g, sigma2, R) slice: the truth trajectory, R observation
/// records, and two filters per record (unbiased and biased initialization),
/// evaluated in lockstep so no ensemble history is kept.
inline SliceResult run_single(const ExperimentConfig& cfg, const StateVector& x0_true, double g, double sigma2,
                              FilterKind kind, int n_realizations, int jobs = 1) {
  SliceResult out;
  out.filter = kind;
  out.g = g;
  out.sigma2 = sigma2;
  out.n_realizations = n_realizations;
  l96::ModelConfig model = cfg.model;
  model.g = g;
  model.validate();
  const int n = cfg.steps_for(g);
  out.n_steps = n;

  out.provenance.config_hash = config_hash(cfg);
  out.provenance.master_seed = cfg.master_seed;
  out.provenance.truth_seed = truth_seed(cfg);

  const l96::Trajectory truth = l96::generate_truth(x0_true, n, model);
  const auto obs = l96::ObservationModel::alternate(model.d, sigma2);
  const GaussianSpec init_u = cfg.init_unbiased.around(x0_true);
  const GaussianSpec init_b = cfg.init_biased.around(x0_true);

  std::vector<sinkhorn::SinkhornConfig> scfgs;
  for (double eps : cfg.epsilon_values()) {
    sinkhorn::SinkhornConfig s = cfg.sinkhorn;
    s.epsilon = eps;
    scfgs.push_back(s);
  }

  const auto R = static_cast<std::size_t>(n_realizations);
  for (int r = 0; r < n_realizations; ++r) {
    out.provenance.observation_seeds.push_back(observation_seed(cfg, r));
    out.provenance.filter_seeds_unbiased.push_back(filter_seed(cfg, kind, false, r));
    out.provenance.filter_seeds_biased.push_back(filter_seed(cfg, kind, true, r));
  }

  std::vector<detail::RealizationTrace> traces(R);
  const L96Propagator propagate(model);
  parallel_for(R, jobs, [&](std::size_t r) {
    const auto ri = static_cast<int>(r);
    const auto rec = l96::observe(truth, obs, out.provenance.observation_seeds[r], ri);
    if (kind == FilterKind::enkf) {
      enkf::EnsembleKalmanFilter<L96Propagator> fu(init_u, obs, cfg.enkf, propagate,
                                                   out.provenance.filter_seeds_unbiased[r]);
      enkf::EnsembleKalmanFilter<L96Propagator> fb(init_b, obs, cfg.enkf, propagate,
                                                   out.provenance.filter_seeds_biased[r]);
      traces[r] = detail::trace_pair(fu, fb, kind, truth, rec, scfgs, ri);
    } else {
      bpf::BootstrapParticleFilter<L96Propagator> fu(init_u, obs, cfg.bpf, propagate,
                                                     out.provenance.filter_seeds_unbiased[r]);
      bpf::BootstrapParticleFilter<L96Propagator> fb(init_b, obs, cfg.bpf, propagate,
                                                     out.provenance.filter_seeds_biased[r]);
      traces[r] = detail::trace_pair(fu, fb, kind, truth, rec, scfgs, ri);
    }
  });

  for (const auto& tr : traces) {
    out.errors_unbiased.e2.push_back(tr.e2_u);
    out.errors_unbiased.s2.push_back(tr.s2_u);
    out.errors_biased.e2.push_back(tr.e2_b);
    out.errors_biased.s2.push_back(tr.s2_b);
  }
  out.errors_unbiased.finalize();
  out.errors_biased.finalize();

  metrics::FitOptions fopt;
  fopt.start_time = cfg.fit_start_time;
  for (std::size_t e = 0; e < scfgs.size(); ++e) {
    EpsilonResult er;
    er.epsilon = scfgs[e].epsilon;
    er.divergence.times = truth.times;
    for (const auto& tr : traces) {
      er.divergence.per_realization.push_back(tr.d_eps[e]);
      er.divergence.negative_flags += tr.negative_flags;
    }
    er.divergence.mean = metrics::mean_over_rows(er.divergence.per_realization);
    if (er.divergence.times.size() >= 4) {
      er.fit = metrics::exp_fit(er.divergence.times, er.divergence.mean, fopt);
    } else {
      er.fit.message = "too few points to fit";
    }
    try {
      std::size_t first = 0;
      while (first < er.divergence.times.size() && er.divergence.times[first] < cfg.fit_start_time) ++first;
      er.correlation = metrics::rmse_vs_divergence(out.errors_biased, er.divergence, first);
    } catch (const Error& err) {
      er.correlation_error = err.what();
    }
    out.per_epsilon.push_back(std::move(er));
  }
  return out;
}

inline SliceResult run_single(const ExperimentConfig& cfg, double g, double sigma2, FilterKind kind, int jobs = 1) {
  cfg.validate();
  return run_single(cfg, spin_up_truth(cfg), g, sigma2, kind, cfg.n_realizations, jobs);
}

struct SliceKey {
  FilterKind filter;
  double g;
  double sigma2;
  int n_realizations;
};

/// Grid order: filter, then g, then sigma2, then realization count.
inline std::vector<SliceKey> sweep_grid(const ExperimentConfig& cfg) {
  std::vector<SliceKey> keys;
  for (auto f : cfg.filters)
    for (double g : cfg.g_values())
      for (double s2 : cfg.sigma2_values())
        for (int R : cfg.realization_counts()) keys.push_back({f, g, s2, R});
  return keys;
}

/// Every slice of the grid. Failures are recorded on the slice and do not
/// stop the sweep.
inline std::vector<SliceResult> run_sweep(const ExperimentConfig& cfg, int jobs = 1) {
  cfg.validate();
  const StateVector x0 = spin_up_truth(cfg);
  const auto keys = sweep_grid(cfg);
  std::vector<SliceResult> results(keys.size());
  const int outer = std::max(1, std::min<int>(jobs, static_cast<int>(keys.size())));
  const int inner = std::max(1, jobs / outer);
  parallel_for(keys.size(), outer, [&](std::size_t i) {
    const auto& k = keys[i];
    try {
      results[i] = run_single(cfg, x0, k.g, k.sigma2, k.filter, k.n_realizations, inner);
    } catch (const Error& e) {
      results[i] = SliceResult{};
      results[i].filter = k.filter;
      results[i].g = k.g;
      results[i].sigma2 = k.sigma2;
      results[i].n_realizations = k.n_realizations;
      results[i].error = e.what();
      results[i].error_kind = e.kind();
    }
  });
  return results;
}

}  // namespace filterstab::harness
