#pragma once

#include <vector>

#include "mfbsde/problem.hpp"
#include "mfbsde/types.hpp"

namespace mfbsde {

// Independent brute-force solver for the closed expectations system
//   xbar' = b1 xbar + b2·ybar + b0(t, xbar, ybar)
//   ybar' = -f1 xbar - f2 ybar - f0(t, xbar, ybar),
//   ybar(T) = h1 xbar(T) + h2(xbar(T)),
// used as the anti-circularity cross-check for the Riccati/field pipeline.
// This solver never touches the Riccati or field code paths.

struct OracleConfig {
  double tol = 1e-10;
  int max_iter = 200;
  double damping = 0.5;
  int max_halvings = 12;
  int growth_streak = 10;
  int slice_nodes = 33;
  int force_windows = 0;  // testing hook: fixed window count (0 = adaptive)
  double multiplicity_scale = 1e3;  // fixed points differing by > scale*tol
};

struct ExpectationPath {
  std::vector<double> tgrid;
  std::vector<double> xbar;
  std::vector<Vec> ybar;
  bool converged = false;
  int iterations = 0;
  // Two Picard runs from distinct seeds (zero curve and an offset h-curve)
  // landed on fixed points further apart than multiplicity_scale * tol.
  bool multiple_fixed_points = false;
  double fixed_point_gap = 0.0;
  int windows = 1;
};

/// Damped Picard iteration over the whole interval with automatic interval
/// halving (pasting) on divergence; runs twice from distinct initial guesses
/// to surface non-uniqueness. The returned path is the zero-seed run.
/// Throws SolveError after max_halvings divergent attempts.
ExpectationPath solve_expectation_system(const ProblemSpec& spec, double nu0,
                                         const std::vector<double>& tgrid,
                                         const OracleConfig& cfg = {});

}  // namespace mfbsde
