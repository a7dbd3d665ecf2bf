#pragma once

#include <Eigen/Core>
#include <stdexcept>
#include <string>

namespace mfbsde {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Error raised when a numerical routine cannot produce a usable result
/// (blow-up, non-contraction, singular matching condition, ...).
struct SolveError : std::runtime_error {
  explicit SolveError(const std::string& what) : std::runtime_error(what) {}
};

/// Error raised when a user-supplied evaluator returns a non-finite value.
struct EvaluatorError : std::runtime_error {
  explicit EvaluatorError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mfbsde
