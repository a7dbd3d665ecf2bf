#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mfbsde/types.hpp"

namespace mfbsde {

/// Coefficient data of the mean-field forward-backward system
///
///   dX = [b1(t) X + b2(t)·Y + b0(t, E[X], E[Y])] dt + sigma(t,X,Y,E[X],E[Y]) dW
///   dY = -[f1(t) X + f2(t) Y + f0(t, E[X], E[Y])] dt + Z dW,
///   Y_T = h1 X_T + h2(E[X_T])
///
/// with scalar forward state, n-dimensional backward state and d-dimensional
/// Brownian motion. All evaluators must be pure; ProblemSpec is treated as
/// immutable after construction and is safe to share across workers.
struct ProblemSpec {
  double T = 1.0;  // time horizon
  int n = 1;       // backward dimension
  int d = 1;       // Brownian dimension
  double K = 1.0;  // declared Lipschitz / bound constant

  std::function<double(double)> b1;  // t -> R
  std::function<Vec(double)> b2;     // t -> R^n (acts on Y by inner product)
  std::function<Vec(double)> f1;     // t -> R^n
  std::function<Mat(double)> f2;     // t -> R^{n x n}

  std::function<double(double, double, const Vec&)> b0;  // (t, xbar, ybar) -> R
  std::function<Vec(double, double, const Vec&)> f0;     // (t, xbar, ybar) -> R^n

  // Forward diffusion row: (t, x, y, xbar, ybar) -> R^d.
  std::function<Vec(double, double, const Vec&, double, const Vec&)> sigma;

  Vec h1;                              // R^n
  std::function<Vec(double)> h2;       // xbar -> R^n

  // Optional analytic partial derivatives (used by the variational solver;
  // central differences are substituted when absent).
  std::function<double(double, double, const Vec&)> db0_dxbar;
  std::function<Vec(double, double, const Vec&)> db0_dybar;   // R^n
  std::function<Vec(double, double, const Vec&)> df0_dxbar;   // R^n
  std::function<Mat(double, double, const Vec&)> df0_dybar;   // R^{n x n}
  std::function<Vec(double)> dh2;                             // h2'(xbar)

  // When set, base bounds |b0(t,0,0)|, |f0(t,0,0)|, |sigma(t,0,...,0)|,
  // |h2(0)| <= K are validated as well.
  bool check_base_bounds = false;

  std::string name;  // presentation only
};

struct ValidationGridConfig {
  int t_samples = 65;
  double theta_radius = 10.0;  // box half-width for (xbar, ybar) samples
  int lattice_per_axis = 5;    // deterministic lattice resolution
  int random_pairs = 256;      // extra pseudo-random pairs
  std::uint64_t seed = 0x5eedULL;
  double tolerance = 1e-10;    // relative slack on the K bounds
};

struct Violation {
  std::string condition;  // e.g. "b1-bound", "b0-lipschitz"
  std::string point;      // human-readable witness point
  double measured = 0.0;
  double threshold = 0.0;
};

struct ValidationReport {
  bool pass = true;
  std::vector<Violation> violations;
  int points_checked = 0;
  double resolution = 0.0;  // coarsest sampled spacing, recorded with the verdict
};

/// Samples the boundedness/Lipschitz conditions of the problem class on a
/// deterministic grid plus random pairs. A pass means "no violation found at
/// the recorded resolution". Throws EvaluatorError on non-finite output.
ValidationReport validate_spec(const ProblemSpec& spec,
                               const ValidationGridConfig& grid = {});

/// dX = alpha E[Y] dt;  dY = -(lambda E[X] + (1-lambda) X) dt + Z dW,
/// Y_T = theta E[X_T] + (1-theta) X_T.  K = max(1, |alpha|).
/// With `require_resonance` the parameters must satisfy
/// alpha sin(sqrt(alpha) T) = sqrt(alpha) cos(sqrt(alpha) T) (alpha >= 0).
ProblemSpec preset_example1(double alpha, double lambda, double theta, double T,
                            bool require_resonance = false);

/// Example 1 plus a beta E[X] forward drift term. K = max(1,|alpha|,|beta|).
ProblemSpec preset_example2(double alpha, double beta, double lambda,
                            double theta, double T);

/// Coefficients of the linear-quadratic example; each entry may depend on t.
struct LqCoefficients {
  std::function<double(double)> A, Abar, B, Bbar, Q, Qbar, R, Rbar, sigma;
  double G = 0.0, Gbar = 0.0;
  double T = 1.0;

  static std::function<double(double)> constant(double c) {
    return [c](double) { return c; };
  }
  /// All-constant convenience constructor.
  static LqCoefficients constants(double A, double Abar, double B, double Bbar,
                                  double Q, double Qbar, double R, double Rbar,
                                  double G, double Gbar, double sigma, double T);
};

/// dX = [A X + Abar E[X] - (B^2/R)(Y - E[Y]) - ((B+Bbar)^2/(R+Rbar)) E[Y]] dt
///      + sigma_t dW,
/// dY = -[A Y + Abar E[Y] + Q X + Qbar E[X]] dt + Z dW,
/// Y_T = G X_T + Gbar E[X_T].
/// Throws SolveError if R or R+Rbar vanishes at a sampled t.
ProblemSpec preset_example3(const LqCoefficients& lq);

/// Default LQ parameter set used by tests and the CLI; satisfies
/// (E1)+(E2)(i)+(E3)(i).
LqCoefficients lq_defaults();

/// Left side minus right side of the resonance identity
/// alpha sin(sqrt(alpha) T) - sqrt(alpha) cos(sqrt(alpha) T) for alpha >= 0.
double resonance_gap(double alpha, double T);

}  // namespace mfbsde
