#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace filterstab {

using StateVector = Eigen::VectorXd;

// Row i is one ensemble member / particle / atom.
using PointMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Seed = std::uint64_t;

enum class ErrorKind {
  validation,
  config,
  invalid_state,
  divergence,
  numerical,
  non_convergence,
  degenerate_weights,
  insufficient_sample,
  undefined_correlation,
  unsupported_instance,
  io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::validation: return "validation";
    case ErrorKind::config: return "config";
    case ErrorKind::invalid_state: return "invalid-state";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::numerical: return "numerical";
    case ErrorKind::non_convergence: return "non-convergence";
    case ErrorKind::degenerate_weights: return "degenerate-weights";
    case ErrorKind::insufficient_sample: return "insufficient-sample";
    case ErrorKind::undefined_correlation: return "undefined-correlation";
    case ErrorKind::unsupported_instance: return "unsupported-instance";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

/// Every failure raised by the library carries a kind so callers (the CLI in
/// particular) can map it onto an exit status without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  bool is_config_error() const noexcept {
    return kind_ == ErrorKind::config || kind_ == ErrorKind::validation;
  }

 private:
  ErrorKind kind_;
};

/// Raised by the Sinkhorn iterations when max_iter is hit.
class NonConvergenceError : public Error {
 public:
  NonConvergenceError(const std::string& what, double last_relative_error)
      : Error(ErrorKind::non_convergence, what), last_relative_error_(last_relative_error) {}

  double last_relative_error() const noexcept { return last_relative_error_; }

 private:
  double last_relative_error_;
};

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) throw Error(kind, what);
}

inline bool all_finite(const Eigen::Ref<const Eigen::VectorXd>& v) { return v.allFinite(); }

}  // namespace filterstab
