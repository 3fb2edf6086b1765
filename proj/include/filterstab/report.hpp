#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "filterstab/core.hpp"
#include "filterstab/harness.hpp"
#include "filterstab/metrics.hpp"

namespace filterstab::report {

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline const char* filter_label(const std::string& f) { return f == "bpf" ? "PF" : "EnKF"; }

/// Everything the writers need for one (filter, g, sigma2, epsilon, R) slice.
/// Built either from in-memory results or from a series CSV.
struct SliceSummary {
  std::string filter;
  double g = 0.0;
  double sigma2 = 0.0;
  double epsilon = 0.0;
  int n_realizations = 0;
  std::vector<double> times;
  std::vector<std::vector<double>> d_eps;  // [realization][step]
  std::vector<double> d_eps_mean;
  std::vector<std::vector<double>> e2_unbiased, e2_biased, s2_unbiased, s2_biased;
  std::vector<double> e2_unbiased_mean, e2_biased_mean, s2_unbiased_mean, s2_biased_mean;
  metrics::FitResult fit;
  std::optional<metrics::CorrelationSummary> correlation;
  std::string error;
};

inline std::vector<SliceSummary> summarize(const std::vector<harness::SliceResult>& results) {
  std::vector<SliceSummary> out;
  for (const auto& s : results) {
    if (s.failed()) {
      SliceSummary sum;
      sum.filter = harness::to_string(s.filter);
      sum.g = s.g;
      sum.sigma2 = s.sigma2;
      sum.n_realizations = s.n_realizations;
      sum.error = s.error;
      out.push_back(std::move(sum));
      continue;
    }
    for (const auto& e : s.per_epsilon) {
      SliceSummary sum;
      sum.filter = harness::to_string(s.filter);
      sum.g = s.g;
      sum.sigma2 = s.sigma2;
      sum.epsilon = e.epsilon;
      sum.n_realizations = s.n_realizations;
      sum.times = e.divergence.times;
      sum.d_eps = e.divergence.per_realization;
      sum.d_eps_mean = e.divergence.mean;
      sum.e2_unbiased = s.errors_unbiased.e2;
      sum.e2_biased = s.errors_biased.e2;
      sum.s2_unbiased = s.errors_unbiased.s2;
      sum.s2_biased = s.errors_biased.s2;
      sum.e2_unbiased_mean = s.errors_unbiased.e2_mean;
      sum.e2_biased_mean = s.errors_biased.e2_mean;
      sum.s2_unbiased_mean = s.errors_unbiased.s2_mean;
      sum.s2_biased_mean = s.errors_biased.s2_mean;
      sum.fit = e.fit;
      sum.correlation = e.correlation;
      out.push_back(std::move(sum));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Series CSV

inline constexpr const char* kSeriesHeader =
    "filter,g,sigma2,epsilon,realization,step,time,d_eps,e2_unbiased,e2_biased,s2_unbiased,s2_biased";

inline void write_series_csv(std::ostream& os, const std::vector<SliceSummary>& slices) {
  os << kSeriesHeader << '\n';
  for (const auto& s : slices) {
    if (!s.error.empty()) continue;
    const std::string prefix = s.filter + ',' + fmt17(s.g) + ',' + fmt17(s.sigma2) + ',' + fmt17(s.epsilon) + ',';
    auto row = [&](const std::string& real, std::size_t k, double d, double eu, double eb, double su, double sb) {
      os << prefix << real << ',' << k << ',' << fmt17(s.times[k]) << ',' << fmt17(d) << ',' << fmt17(eu) << ','
         << fmt17(eb) << ',' << fmt17(su) << ',' << fmt17(sb) << '\n';
    };
    for (std::size_t r = 0; r < s.d_eps.size(); ++r)
      for (std::size_t k = 0; k < s.times.size(); ++k)
        row(std::to_string(r), k, s.d_eps[r][k], s.e2_unbiased[r][k], s.e2_biased[r][k], s.s2_unbiased[r][k],
            s.s2_biased[r][k]);
    for (std::size_t k = 0; k < s.times.size(); ++k)
      row("mean", k, s.d_eps_mean[k], s.e2_unbiased_mean[k], s.e2_biased_mean[k], s.s2_unbiased_mean[k],
          s.s2_biased_mean[k]);
  }
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, std::size_t line_no) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(ErrorKind::io, "line " + std::to_string(line_no) + ": cannot parse number '" + s + "'");
  }
}

}  // namespace detail

/// Parses a series CSV back into slices (no fits attached). Realization
/// rows must precede the mean rows of the same slice, as written.
inline std::vector<SliceSummary> read_series_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != kSeriesHeader)
    throw Error(ErrorKind::io, "series CSV header mismatch");
  std::vector<SliceSummary> out;
  std::map<std::tuple<std::string, double, double, double>, std::size_t> index;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 12) throw Error(ErrorKind::io, "line " + std::to_string(line_no) + ": expected 12 fields");
    const double g = detail::parse_double(f[1], line_no);
    const double s2 = detail::parse_double(f[2], line_no);
    const double eps = detail::parse_double(f[3], line_no);
    const auto key = std::make_tuple(f[0], g, s2, eps);
    auto it = index.find(key);
    if (it == index.end()) {
      SliceSummary s;
      s.filter = f[0];
      s.g = g;
      s.sigma2 = s2;
      s.epsilon = eps;
      out.push_back(std::move(s));
      it = index.emplace(key, out.size() - 1).first;
    }
    SliceSummary& s = out[it->second];
    const auto step = static_cast<std::size_t>(std::stoul(f[5]));
    const double t = detail::parse_double(f[6], line_no);
    const double vals[5] = {detail::parse_double(f[7], line_no), detail::parse_double(f[8], line_no),
                            detail::parse_double(f[9], line_no), detail::parse_double(f[10], line_no),
                            detail::parse_double(f[11], line_no)};
    if (f[4] == "mean") {
      if (step != s.d_eps_mean.size()) throw Error(ErrorKind::io, "line " + std::to_string(line_no) + ": step out of order");
      s.times.push_back(t);
      s.d_eps_mean.push_back(vals[0]);
      s.e2_unbiased_mean.push_back(vals[1]);
      s.e2_biased_mean.push_back(vals[2]);
      s.s2_unbiased_mean.push_back(vals[3]);
      s.s2_biased_mean.push_back(vals[4]);
    } else {
      const auto r = static_cast<std::size_t>(std::stoul(f[4]));
      if (r >= s.d_eps.size()) {
        s.d_eps.resize(r + 1);
        s.e2_unbiased.resize(r + 1);
        s.e2_biased.resize(r + 1);
        s.s2_unbiased.resize(r + 1);
        s.s2_biased.resize(r + 1);
      }
      s.d_eps[r].push_back(vals[0]);
      s.e2_unbiased[r].push_back(vals[1]);
      s.e2_biased[r].push_back(vals[2]);
      s.s2_unbiased[r].push_back(vals[3]);
      s.s2_biased[r].push_back(vals[4]);
    }
  }
  for (auto& s : out) s.n_realizations = static_cast<int>(s.d_eps.size());
  return out;
}

/// Fits the mean D_eps curve and the RMSE correlation of a slice read from CSV.
inline void refit(SliceSummary& s, double fit_start_time = 0.0) {
  metrics::FitOptions opt;
  opt.start_time = fit_start_time;
  if (s.times.size() >= 4) {
    s.fit = metrics::exp_fit(s.times, s.d_eps_mean, opt);
  } else {
    s.fit = {};
    s.fit.message = "too few points to fit";
  }
  metrics::ErrorSeries err;
  err.e2_mean = s.e2_biased_mean;
  err.rmse.resize(err.e2_mean.size());
  for (std::size_t k = 0; k < err.rmse.size(); ++k) err.rmse[k] = std::sqrt(err.e2_mean[k]);
  metrics::DivergenceSeries div;
  div.times = s.times;
  div.mean = s.d_eps_mean;
  std::size_t first = 0;
  while (first < s.times.size() && s.times[first] < fit_start_time) ++first;
  try {
    s.correlation = metrics::rmse_vs_divergence(err, div, first);
  } catch (const Error&) {
    s.correlation.reset();
  }
}

// ---------------------------------------------------------------------------
// Fit JSON

inline nlohmann::json fits_json(const std::vector<SliceSummary>& slices, const nlohmann::json& provenance = nullptr) {
  nlohmann::json j;
  if (!provenance.is_null()) j["provenance"] = provenance;
  j["slices"] = nlohmann::json::array();
  for (const auto& s : slices) {
    nlohmann::json r;
    r["filter"] = s.filter;
    r["g"] = s.g;
    r["sigma2"] = s.sigma2;
    if (!s.error.empty()) {
      r["n_realizations"] = s.n_realizations;
      r["error"] = s.error;
      j["slices"].push_back(std::move(r));
      continue;
    }
    r["epsilon"] = s.epsilon;
    r["n_realizations"] = s.n_realizations;
    r["a"] = s.fit.a;
    r["ci_a"] = s.fit.ci_a;
    if (s.fit.ok) {
      r["lambda"] = s.fit.lambda;
      r["ci_lambda"] = s.fit.ci_lambda;
    } else {
      r["lambda"] = nullptr;
      r["ci_lambda"] = nullptr;
    }
    r["c"] = s.fit.c;
    r["ci_c"] = s.fit.ci_c;
    r["r2"] = s.fit.r2;
    r["fit_ok"] = s.fit.ok;
    if (!s.fit.ok) r["fit_message"] = s.fit.message;
    r["pearson_rmse_deps"] = s.correlation ? nlohmann::json(s.correlation->pearson_r) : nlohmann::json(nullptr);
    j["slices"].push_back(std::move(r));
  }
  return j;
}

inline nlohmann::json provenance_json(const harness::ExperimentConfig& cfg,
                                      const std::vector<harness::SliceResult>& results) {
  nlohmann::json p;
  p["config_hash"] = harness::config_hash(cfg);
  p["config"] = harness::config_to_json(cfg);
  p["master_seed"] = cfg.master_seed;
  p["truth_seed"] = harness::truth_seed(cfg);
  nlohmann::json slices = nlohmann::json::array();
  for (const auto& s : results) {
    nlohmann::json e;
    e["filter"] = harness::to_string(s.filter);
    e["g"] = s.g;
    e["sigma2"] = s.sigma2;
    e["n_realizations"] = s.n_realizations;
    e["observation_seeds"] = s.provenance.observation_seeds;
    e["filter_seeds_unbiased"] = s.provenance.filter_seeds_unbiased;
    e["filter_seeds_biased"] = s.provenance.filter_seeds_biased;
    slices.push_back(std::move(e));
  }
  p["slices"] = std::move(slices);
  return p;
}

// ---------------------------------------------------------------------------
// Summary tables: rows a, lambda, c per filter, one column per value of the
// swept axis.

enum class Axis { g, sigma2 };

inline std::string value_pm(double v, double ci) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g ± %.2g", v, ci);
  return buf;
}

inline std::string format_table(const std::vector<SliceSummary>& slices, Axis axis) {
  // Group by the fixed parameters (other axis, epsilon, R).
  using Group = std::tuple<double, double, int>;
  std::vector<Group> groups;
  std::map<Group, std::vector<const SliceSummary*>> members;
  for (const auto& s : slices) {
    if (!s.error.empty()) continue;
    const Group key{axis == Axis::g ? s.sigma2 : s.g, s.epsilon, s.n_realizations};
    if (!members.count(key)) groups.push_back(key);
    members[key].push_back(&s);
  }

  std::ostringstream os;
  const char* axis_name = axis == Axis::g ? "g" : "sigma2";
  const char* fixed_name = axis == Axis::g ? "sigma2" : "g";
  for (const auto& key : groups) {
    const auto& ms = members[key];
    std::vector<double> columns;
    for (const auto* s : ms) {
      const double v = axis == Axis::g ? s->g : s->sigma2;
      if (std::find(columns.begin(), columns.end(), v) == columns.end()) columns.push_back(v);
    }
    os << "# fit a*exp(-lambda*t) + c of mean D_eps; " << fixed_name << " = " << std::get<0>(key)
       << ", epsilon = " << std::get<1>(key) << ", realizations = " << std::get<2>(key) << '\n';
    os << "| param | filter |";
    for (double c : columns) os << ' ' << axis_name << " = " << c << " |";
    os << '\n';
    os << "|---|---|";
    for (std::size_t i = 0; i < columns.size(); ++i) os << "---|";
    os << '\n';
    for (const char* param : {"a", "lambda", "c"}) {
      for (const char* filter : {"bpf", "enkf"}) {
        bool any = false;
        for (const auto* s : ms) any = any || s->filter == filter;
        if (!any) continue;
        os << "| " << param << " | " << filter_label(filter) << " |";
        for (double c : columns) {
          const SliceSummary* hit = nullptr;
          for (const auto* s : ms)
            if (s->filter == filter && (axis == Axis::g ? s->g : s->sigma2) == c) hit = s;
          std::string cell = "-";
          if (hit) {
            const auto& f = hit->fit;
            const std::string p = param;
            if (!hit->error.empty())
              cell = "slice failed";
            else if (!f.ok)
              cell = "fit failed";
            else if (p == "a")
              cell = value_pm(f.a, f.ci_a);
            else if (p == "lambda")
              cell = value_pm(f.lambda, f.ci_lambda);
            else
              cell = value_pm(f.c, f.ci_c);
          }
          os << ' ' << cell << " |";
        }
        os << '\n';
      }
    }
    os << '\n';
  }
  return os.str();
}

/// Long-format plot data: one row per (slice, time, quantity).
inline void write_plot_long(std::ostream& os, const std::vector<SliceSummary>& slices) {
  os << "filter,g,sigma2,epsilon,time,quantity,value\n";
  for (const auto& s : slices) {
    if (!s.error.empty()) continue;
    const std::string prefix = s.filter + ',' + fmt17(s.g) + ',' + fmt17(s.sigma2) + ',' + fmt17(s.epsilon) + ',';
    for (std::size_t k = 0; k < s.times.size(); ++k) {
      const std::string pt = prefix + fmt17(s.times[k]) + ',';
      os << pt << "mean_d_eps," << fmt17(s.d_eps_mean[k]) << '\n';
      if (s.fit.ok)
        os << pt << "fit_d_eps," << fmt17(metrics::exp_model(s.times[k], {s.fit.a, s.fit.lambda, s.fit.c})) << '\n';
      os << pt << "rmse_unbiased," << fmt17(std::sqrt(s.e2_unbiased_mean[k])) << '\n';
      os << pt << "rmse_biased," << fmt17(std::sqrt(s.e2_biased_mean[k])) << '\n';
      os << pt << "mean_e2_unbiased," << fmt17(s.e2_unbiased_mean[k]) << '\n';
      os << pt << "mean_e2_biased," << fmt17(s.e2_biased_mean[k]) << '\n';
      os << pt << "mean_s2_unbiased," << fmt17(s.s2_unbiased_mean[k]) << '\n';
      os << pt << "mean_s2_biased," << fmt17(s.s2_biased_mean[k]) << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Output directory

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::io, "cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw Error(ErrorKind::io, "write failed for " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

/// Writes series.csv (one per realization count when several are swept),
/// fits.json, tables.md and plot_long.csv.
inline void write_outputs(const std::filesystem::path& dir, const std::vector<SliceSummary>& slices,
                          const nlohmann::json& provenance = nullptr) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());

  std::vector<int> counts;
  for (const auto& s : slices)
    if (s.error.empty() && std::find(counts.begin(), counts.end(), s.n_realizations) == counts.end())
      counts.push_back(s.n_realizations);
  if (counts.size() <= 1) {
    std::ostringstream os;
    write_series_csv(os, slices);
    write_text(dir / "series.csv", os.str());
  } else {
    for (int R : counts) {
      std::vector<SliceSummary> part;
      for (const auto& s : slices)
        if (s.error.empty() && s.n_realizations == R) part.push_back(s);
      std::ostringstream os;
      write_series_csv(os, part);
      write_text(dir / ("series_R" + std::to_string(R) + ".csv"), os.str());
    }
  }
  write_text(dir / "fits.json", fits_json(slices, provenance).dump(2) + "\n");
  write_text(dir / "tables.md", format_table(slices, Axis::g) + format_table(slices, Axis::sigma2));
  std::ostringstream plot;
  write_plot_long(plot, slices);
  write_text(dir / "plot_long.csv", plot.str());
}

}  // namespace filterstab::report
