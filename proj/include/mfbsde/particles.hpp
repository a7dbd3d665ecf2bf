#pragma once

#include <cstdint>
#include <vector>

#include "mfbsde/field.hpp"
#include "mfbsde/master.hpp"
#include "mfbsde/problem.hpp"
#include "mfbsde/types.hpp"

namespace mfbsde {

/// Initial law of the forward state; `mean` is checked against the sample
/// mean to three standard errors before stepping starts.
struct InitLaw {
  enum class Kind { point_mass, normal, uniform } kind = Kind::point_mass;
  double mean = 0.0;
  double spread = 0.0;  // std for normal, half-width for uniform

  static InitLaw point(double mean) { return {Kind::point_mass, mean, 0.0}; }
  static InitLaw normal(double mean, double sd) { return {Kind::normal, mean, sd}; }
  static InitLaw uniform(double mean, double halfwidth) {
    return {Kind::uniform, mean, halfwidth};
  }
};

enum class MeanMode { fbode_mean, empirical_mean };

struct ParticleEnsemble {
  int N = 0;
  std::uint64_t seed = 0;
  std::vector<double> tgrid;
  // Full X paths ([p * (steps+1) + k]) are kept only when N*(steps+1) fits
  // below path_cap; Y and Z are recomputable from X, the per-step (P, Phi)
  // pair and the counter-based noise streams.
  std::vector<double> X;
  bool paths_stored = false;
};

struct BsdeStats {
  double step_rms = 0.0;   // RMS over particles and steps of the one-step residual
  double defect_rms = 0.0; // RMS over particles and steps of the accumulated defect
  double defect_max = 0.0;
  double terminal_gap = 0.0;  // max |Y_T - h1 X_T - h2(nu_T)| (0 by construction in mode A)
};

struct SimulationOutput {
  ParticleEnsemble ensemble;
  MeanMode mode = MeanMode::fbode_mean;
  std::vector<double> empirical_mean_X;  // per step
  std::vector<double> empirical_std_X;   // per step (sample std)
  std::vector<double> nu_path;  // reference mean path (discrete FBODE mean dynamics)
  std::vector<Vec> P_path;      // P at each grid node
  std::vector<Vec> Phi_path;    // Phi(t_k, nu_k) along the mean source actually used
  double mean_gap = 0.0;        // max_k |empirical mean - nu_path|
  double max_abs_X = 0.0, max_abs_Y = 0.0, max_abs_Z = 0.0;
  BsdeStats bsde;
  double bsde_rms = 0.0;  // headline number: defect_rms
};

struct SimulateConfig {
  std::size_t path_cap = 20'000'000;  // max stored X entries
  int workers = 0;                    // 0 => hardware concurrency
  int subsample = 0;                  // particles exported to CSV (0 = auto)
};

/// Explicit first-order stochastic stepping of the particle system with Y
/// imposed by the decoupling field:
///   Y_k = U(t_k, X_k, nu_k),  ybar_k = mean_value(t_k, nu_k),
///   X_{k+1} = X_k + [b1 X_k + b2·Y_k + b0(t_k, nu_k, ybar_k)] dt
///           + sigma(t_k, X_k, Y_k, nu_k, ybar_k)·dW_k,
/// nu_k from the FBODE reference path (mode A) or the running empirical mean
/// (mode B). Identical (spec, N, seed, tgrid) give bitwise identical output
/// for any worker count.
SimulationOutput simulate(const ProblemSpec& spec, const MasterField& mf,
                          double nu0, const InitLaw& init, int N, int steps,
                          std::uint64_t seed, MeanMode mode,
                          const SimulateConfig& cfg = {});

/// Backward-equation diagnostics. Recomputed from stored paths when present
/// (regenerating the noise from the counter-based streams), otherwise the
/// statistics streamed during simulate are returned.
BsdeStats bsde_residual(const SimulationOutput& out, const ProblemSpec& spec);

struct StabilityRecord {
  double ratio = 0.0;       // (sup gap_nu^2 + sup gap_ybar^2) / |nu0_a - nu0_b|^2
  double lip_global = 0.0;  // bound from compute_constants
  bool within_bound = false;
};

/// Realized mean-level stability of two FBODE runs started from nu0_a and
/// nu0_b, compared against the explicit global Lipschitz bound.
StabilityRecord stability_experiment(const ProblemSpec& spec,
                                     const MasterField& mf, double nu0_a,
                                     double nu0_b, int steps);

}  // namespace mfbsde
