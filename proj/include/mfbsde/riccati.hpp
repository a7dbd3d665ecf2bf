#pragma once

#include <vector>

#include "mfbsde/problem.hpp"
#include "mfbsde/types.hpp"

namespace mfbsde {

enum class Interp { linear, cubic };

/// Gridded solution of the backward Riccati equation
///   dP/dt = -(b2(t)·P) P - f2(t) P - b1(t) P - f1(t),  P(T) = h1.
struct RiccatiSolution {
  std::vector<double> tgrid;  // increasing, tgrid.back() == T
  std::vector<Vec> P;         // P[k] at tgrid[k]; P.back() == h1 exactly
  Interp interp = Interp::linear;
  double bound = 0.0;         // max |P| observed
};

/// Classical 4th-order one-step integration backward from T with uniform
/// step T/steps. Throws SolveError("riccati-blowup at t=...") when |P|
/// exceeds 1e6 (1+|h1|), which signals an assumption violation.
RiccatiSolution solve_riccati(const ProblemSpec& spec, int steps,
                              Interp interp = Interp::linear);

/// Interpolated evaluation; exact at grid nodes. Throws std::out_of_range
/// outside [0, T].
Vec eval_P(const RiccatiSolution& sol, double t);

/// Midpoint defect of the stored solution against the ODE, together with a
/// local truncation estimate from divided differences. residual[k] covers
/// the interval (tgrid[k], tgrid[k+1]).
struct RiccatiResiduals {
  std::vector<double> residual;  // |dP/dt + (b2·P)P + f2 P + b1 P + f1| at midpoints
  std::vector<double> truncation_estimate;
};
RiccatiResiduals midpoint_residuals(const RiccatiSolution& sol,
                                    const ProblemSpec& spec);

}  // namespace mfbsde
