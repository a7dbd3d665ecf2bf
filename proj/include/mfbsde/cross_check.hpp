#pragma once

#include "mfbsde/field.hpp"
#include "mfbsde/oracle.hpp"
#include "mfbsde/riccati.hpp"

namespace mfbsde {

/// Representation-identity error between the independent expectations solve
/// and the Riccati/field pipeline:
///   max_s | ybar_s - P_s xbar_s - Phi(s, xbar_s) |
/// evaluated at every oracle grid time. Lives in its own translation unit so
/// the oracle solver itself stays free of Riccati/field code paths.
double cross_check(const ProblemSpec& spec, const RiccatiSolution& P,
                   const FieldSolution& fs, const ExpectationPath& path);

}  // namespace mfbsde
