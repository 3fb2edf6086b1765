// Command-line driver: spinup, run, sweep, fit, report.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "filterstab/filterstab.hpp"

namespace fs = std::filesystem;
using namespace filterstab;

namespace {

enum ExitCode { kOk = 0, kConfigError = 2, kNumericalFailure = 3, kPartialSweep = 4 };

struct Options {
  std::string config_path;
  std::optional<Seed> seed;
  std::string out_dir = "out";
  std::string filter;  // empty: keep the config's filter list
  int jobs = default_jobs();
  std::optional<double> g;
  std::optional<double> sigma2;
  std::string series_path;
  double fit_start = 0.0;
};

harness::ExperimentConfig load_config(const Options& o) {
  harness::ExperimentConfig cfg;
  if (!o.config_path.empty()) cfg = harness::parse_config(report::read_text(o.config_path));
  if (o.seed) cfg.master_seed = *o.seed;
  if (o.filter == "both") {
    cfg.filters = {harness::FilterKind::enkf, harness::FilterKind::bpf};
  } else if (!o.filter.empty()) {
    cfg.filters = {harness::parse_filter(o.filter)};
  }
  cfg.validate();
  return cfg;
}

int exit_code_for(const Error& e) { return e.is_config_error() ? kConfigError : kNumericalFailure; }

void write_timing(const fs::path& dir, const std::string& command, double seconds) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::ostringstream os;
  os << "command: " << command << "\nfinished_unix: " << now << "\nwall_seconds: " << seconds << '\n';
  report::write_text(dir / "timing.txt", os.str());
}

int cmd_spinup(const Options& o) {
  const auto cfg = load_config(o);
  const StateVector x0 = harness::spin_up_truth(cfg);
  l96::Trajectory t;
  t.states.push_back(x0);
  t.times.push_back(0.0);
  std::ostringstream os;
  l96::write_csv(os, t);
  fs::create_directories(o.out_dir);
  report::write_text(fs::path(o.out_dir) / "x0_true.csv", os.str());
  std::cout << os.str();
  return kOk;
}

int finish(const Options& o, const harness::ExperimentConfig& cfg, const std::vector<harness::SliceResult>& results,
           const std::string& command, std::chrono::steady_clock::time_point start) {
  const auto slices = report::summarize(results);
  report::write_outputs(o.out_dir, slices, report::provenance_json(cfg, results));
  write_timing(o.out_dir, command,
               std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  int failures = 0;
  for (const auto& r : results) {
    if (!r.failed()) {
      for (const auto& e : r.per_epsilon)
        if (e.divergence.negative_flags > 0)
          std::cerr << "warning: " << harness::to_string(r.filter) << " g=" << r.g << " sigma2=" << r.sigma2
                    << " eps=" << e.epsilon << ": " << e.divergence.negative_flags
                    << " evaluations had S_eps < -1e-6 (clamped to 0)\n";
      continue;
    }
    ++failures;
    std::cerr << "slice " << harness::to_string(r.filter) << " g=" << r.g << " sigma2=" << r.sigma2
              << " failed: " << r.error << '\n';
  }
  for (const auto& s : slices) {
    if (!s.error.empty()) continue;
    std::cout << s.filter << " g=" << s.g << " sigma2=" << s.sigma2 << " eps=" << s.epsilon << " R="
              << s.n_realizations << ": ";
    if (s.fit.ok)
      std::cout << "a=" << s.fit.a << " lambda=" << s.fit.lambda << " c=" << s.fit.c << " r2=" << s.fit.r2;
    else
      std::cout << "fit failed (" << s.fit.message << ")";
    if (s.correlation) std::cout << " pearson(rmse, D)=" << s.correlation->pearson_r;
    std::cout << '\n';
  }
  if (failures == 0) return kOk;
  if (failures == static_cast<int>(results.size())) {
    for (const auto& r : results)
      if (r.error_kind == ErrorKind::config || r.error_kind == ErrorKind::validation) return kConfigError;
    return kNumericalFailure;
  }
  return kPartialSweep;
}

int cmd_run(const Options& o) {
  const auto start = std::chrono::steady_clock::now();
  auto cfg = load_config(o);
  // A single slice: drop the sweep axes other than epsilon.
  if (o.g) cfg.model.g = *o.g;
  if (o.sigma2) cfg.sigma2 = *o.sigma2;
  cfg.sweep_g.clear();
  cfg.sweep_sigma2.clear();
  cfg.sweep_n_realizations.clear();
  cfg.validate();
  const auto results = harness::run_sweep(cfg, o.jobs);
  return finish(o, cfg, results, "run", start);
}

int cmd_sweep(const Options& o) {
  const auto start = std::chrono::steady_clock::now();
  const auto cfg = load_config(o);
  const auto results = harness::run_sweep(cfg, o.jobs);
  return finish(o, cfg, results, "sweep", start);
}

std::vector<report::SliceSummary> load_series(const Options& o) {
  const fs::path path = o.series_path.empty() ? fs::path(o.out_dir) / "series.csv" : fs::path(o.series_path);
  std::istringstream is(report::read_text(path));
  auto slices = report::read_series_csv(is);
  for (auto& s : slices) report::refit(s, o.fit_start);
  return slices;
}

int cmd_fit(const Options& o) {
  const auto slices = load_series(o);
  fs::create_directories(o.out_dir);
  report::write_text(fs::path(o.out_dir) / "fits.json", report::fits_json(slices).dump(2) + "\n");
  std::cout << report::fits_json(slices).dump(2) << '\n';
  return kOk;
}

int cmd_report(const Options& o) {
  const auto slices = load_series(o);
  fs::create_directories(o.out_dir);
  report::write_text(fs::path(o.out_dir) / "tables.md",
                     report::format_table(slices, report::Axis::g) + report::format_table(slices, report::Axis::sigma2));
  std::ostringstream plot;
  report::write_plot_long(plot, slices);
  report::write_text(fs::path(o.out_dir) / "plot_long.csv", plot.str());
  std::cout << report::format_table(slices, report::Axis::g);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Filter stability experiments: EnKF and particle filters on Lorenz-96, compared by Sinkhorn divergence"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "master seed (overrides config)");
    sub->add_option("--out", o.out_dir, "output directory");
    sub->add_option("--filter", o.filter, "enkf, bpf or both (default: config, else both)")->check(CLI::IsMember({"enkf", "bpf", "both"}));
    sub->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
  };

  auto* spinup = app.add_subcommand("spinup", "emit x0_true after the attractor spin-up");
  add_common(spinup);
  auto* run = app.add_subcommand("run", "run one (g, sigma2) slice");
  add_common(run);
  run->add_option("--g", o.g, "observation gap (overrides config)");
  run->add_option("--sigma2", o.sigma2, "observation variance (overrides config)");
  auto* sweep = app.add_subcommand("sweep", "run the grid given by the sweep_* config keys");
  add_common(sweep);
  auto* fit = app.add_subcommand("fit", "refit stored series");
  add_common(fit);
  fit->add_option("--series", o.series_path, "series CSV (default OUT/series.csv)");
  fit->add_option("--fit-start", o.fit_start, "exclude points before this time");
  auto* rep = app.add_subcommand("report", "regenerate tables and plot data from stored series");
  add_common(rep);
  rep->add_option("--series", o.series_path, "series CSV (default OUT/series.csv)");
  rep->add_option("--fit-start", o.fit_start, "exclude points before this time");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (spinup->parsed()) return cmd_spinup(o);
    if (run->parsed()) return cmd_run(o);
    if (sweep->parsed()) return cmd_sweep(o);
    if (fit->parsed()) return cmd_fit(o);
    if (rep->parsed()) return cmd_report(o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumericalFailure;
  }
  return kOk;
}
