#pragma once

#include "mfbsde/field.hpp"
#include "mfbsde/problem.hpp"
#include "mfbsde/riccati.hpp"
#include "mfbsde/types.hpp"

namespace mfbsde {

/// Candidate classical solution of the master equation,
/// U(t, x, nu) = P_t x + Phi(t, nu).
struct MasterField {
  RiccatiSolution P;
  FieldSolution Phi;
};

Vec eval_U(const MasterField& mf, double t, double x, double nu);

/// E[U(t, eta, nu)] for any eta with mean nu: exactly P_t nu + Phi(t, nu)
/// by linearity of U in x (no sampling).
Vec mean_value(const MasterField& mf, double t, double nu);

/// Z = P_t (x) sigma(t, x, U(t,x,nu), nu, mean_value(t,nu)) in R^{n x d};
/// in the Markovian case the martingale-term match forces Z = P sigma.
Mat recover_Z(const MasterField& mf, const ProblemSpec& spec, double t,
              double x, double nu);

struct StencilConfig {
  double dt = 0.0;   // 0 => field slice spacing
  double dnu = 0.0;  // 0 => field nu spacing
  bool richardson = false;
};

/// Residual of the full master equation at (t, x, nu):
///   d_t U + d_x U [b1 x + b2·U + b0(t,nu,E[U])] + 1/2 d_xx U |sigma|^2
///   + d_nu U [b1 nu + b2·E[U] + b0(t,nu,E[U])] + f1 x + f2 U + f0(t,nu,E[U])
/// with d_t U by central difference, d_x U = P_t, d_xx U = 0 and
/// d_nu U from the field's stored derivative. (t,nu) must be interior.
Vec master_residual(const MasterField& mf, const ProblemSpec& spec, double t,
                    double x, double nu, const StencilConfig& stencil = {});

/// The two halves of the decomposition
///   master_residual(t,x,nu) = x * riccati_part(t) + phi_part(t,nu),
/// computed with the same stencils as master_residual.
struct ResidualSplit {
  Vec riccati_part;  // dP/dt + (b2·P)P + f2 P + b1 P + f1 (finite-difference dP/dt)
  Vec phi_part;      // Phi-PDE residual on the aligned stencil
};
ResidualSplit master_residual_split(const MasterField& mf,
                                    const ProblemSpec& spec, double t,
                                    double nu, const StencilConfig& stencil = {});

}  // namespace mfbsde
