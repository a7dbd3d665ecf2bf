#pragma once

#include <functional>
#include <vector>

#include "mfbsde/problem.hpp"
#include "mfbsde/riccati.hpp"
#include "mfbsde/types.hpp"

namespace mfbsde {

struct SolverConfig {
  double tol = 1e-10;     // sup-norm Picard update threshold
  int max_iter = 200;     // Picard sweeps per window
  double window = 0.0;    // initial window length; 0 => whole interval
  double damping = 0.5;   // applied after the first divergence detection
  int max_halvings = 8;   // adaptive window halvings before giving up
  int steps_per_unit = 1000;  // integration nodes per unit time
  int slice_nodes = 33;       // nu-nodes per pasted terminal slice
  int growth_streak = 10;     // consecutive growing updates => divergence
};

/// Sampled dense trajectory: values and time-derivatives on a half-step grid,
/// so Runge-Kutta sweeps over a frozen curve can query stage points through
/// local cubic Hermite interpolation.
struct CurveGrid {
  double a = 0.0, b = 0.0;  // time interval
  double h2 = 0.0;          // half-step spacing
  std::vector<double> nu, dnu;   // scalar mean path
  std::vector<Vec> phi, dphi;    // n-dimensional decoupling component

  int nodes() const { return static_cast<int>(nu.size()); }
  double time_at(int i) const { return a + h2 * i; }
  double eval_nu(double s) const;
  Vec eval_phi(double s) const;
};

/// Solution of the forward-backward ODE
///   nu'  = (b1 + b2·P) nu + b2·phi + b0(s, nu, P nu + phi)
///   phi' = -f2 phi - (b2·phi) P - f0(s, nu, P nu + phi) - P b0(s, nu, P nu + phi)
///   nu(t0) = nu0,   phi(T) = h2(nu(T)).
struct FbodeTrajectory {
  std::vector<double> tgrid;  // nodes from t0 to T
  std::vector<double> nu;
  std::vector<Vec> phi;
  bool converged = false;
  int iterations = 0;          // total Picard sweeps across windows
  double contraction_factor = 0.0;
  int windows = 1;             // number of pasted sub-intervals used
  CurveGrid curve;             // dense representation for downstream solves
};

/// Two-point boundary value solve by damped Picard iteration, with automatic
/// back-to-front window pasting (previously computed terminal slice as
/// terminal data) when the whole-interval iteration does not contract.
/// Throws SolveError("fbode-divergence ...") when the smallest window still
/// diverges.
FbodeTrajectory solve_fbode(const ProblemSpec& spec, const RiccatiSolution& P,
                            double t0, double nu0, const SolverConfig& cfg = {});

/// Gridded decoupling component Phi(t, nu) and its nu-derivative.
struct FieldSolution {
  std::vector<double> tgrid;   // slice times, last == T
  std::vector<double> nugrid;  // increasing
  std::vector<Vec> Phi;        // [k * nugrid.size() + j]
  std::vector<Vec> dPhi;       // same layout
  double lip_estimate = 0.0;   // max adjacent slope in nu
  Interp t_interp = Interp::cubic;

  int nnu() const { return static_cast<int>(nugrid.size()); }
  const Vec& at(int k, int j) const { return Phi[k * nugrid.size() + j]; }
  const Vec& d_at(int k, int j) const { return dPhi[k * nugrid.size() + j]; }

  /// Interpolated evaluation; linear extrapolation beyond the nu-range with
  /// `extrapolated` set when provided. Throws std::out_of_range in t.
  Vec eval(double t, double nu, bool* extrapolated = nullptr) const;
  Vec eval_dnu(double t, double nu, bool* extrapolated = nullptr) const;
};

/// Phi(t_k, nu_j) from solve_fbode started at (t_k, nu_j); dPhi from the
/// variational solve. Independent grid slots are distributed across
/// `workers` threads (0 => hardware concurrency); the result is identical
/// for any worker count.
FieldSolution build_field(const ProblemSpec& spec, const RiccatiSolution& P,
                          const std::vector<double>& tgrid,
                          const std::vector<double>& nugrid,
                          const SolverConfig& cfg = {}, int workers = 0);

/// Derivative of the trajectory with respect to its initial mean: the linear
/// variational system with grad_nu(t0) = 1 and the terminal matching
/// grad_phi(T) = h2'(nu_T) grad_nu(T), solved by superposition (n+1 linear
/// initial-value integrations and an n x n matching solve; for n = 1 this is
/// two IVPs and a scalar match). grad_phi.front() is d(Phi)/d(nu) at (t0,nu0).
struct VariationalSolution {
  std::vector<double> tgrid;
  std::vector<double> grad_nu;
  std::vector<Vec> grad_phi;
};
VariationalSolution solve_variational(const ProblemSpec& spec,
                                      const RiccatiSolution& P,
                                      const FbodeTrajectory& traj,
                                      const SolverConfig& cfg = {});

/// Residual of the Phi-PDE
///   dPhi/dt + dPhi/dnu [(b1+b2·P)nu + b2·Phi + b0] + (b2·Phi) P + f2 Phi
///   + f0 + P b0 = 0
/// assembled on the field grid with a central time stencil (one-sided and
/// flagged on the row next to the terminal slice). (t, nu) must be interior.
struct PdeResidual {
  Vec residual;
  bool one_sided = false;
};
PdeResidual phi_pde_residual(const FieldSolution& fs, const ProblemSpec& spec,
                             const RiccatiSolution& P, double t, double nu);

}  // namespace mfbsde
