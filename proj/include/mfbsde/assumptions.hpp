#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mfbsde/problem.hpp"
#include "mfbsde/types.hpp"

namespace mfbsde {

/// Difference quotients of the mean-field coefficients between two states
/// theta1 = (xbar1, ybar1) and theta2 = (xbar2, ybar2). Zero denominators use
/// the convention (phi(x)-phi(x))/(x-x) := 0.
struct QuotientBundle {
  double b3 = 0.0;  // x-quotient of b0 (at ybar1)
  Vec b4;           // coordinate-by-coordinate y-quotients of b0 (at xbar2)
  Vec f3;           // x-quotients of f0
  Mat f4;           // y-quotients of f0
  Vec h2q;          // x-quotients of h2
};

struct Theta {
  double xbar = 0.0;
  Vec ybar;
};

QuotientBundle diff_quotients(const ProblemSpec& spec, double t,
                              const Theta& theta1, const Theta& theta2);

/// Explicit well-posedness constants.
struct Constants {
  double M = 0.0;            // 2nK(T+1) e^{(2n+2)KT}
  double delta_raw = 0.0;    // 1 / (2M(3M^2+4))
  double delta = 0.0;        // min(delta_raw, T)
  double eps = 0.0;          // 1 / ((K+(K+1)T)^2 e^{4KT})
  double eps_tilde = 0.0;    // 1 / ((2K+(2K+1)T)^2 e^{8KT})
  long long m = 0;           // smallest integer with T - m*delta <= 0
  double lip_interval = 0.0; // 2(M^2+1)
  double lip_global = 0.0;   // (2(M^2+1))^m; +inf when it overflows
  double log_lip_global = 0.0;
  std::optional<double> M_bar;     // max(|lambda|, (2K+(2K+1)T) e^{4KT})
  std::optional<double> delta_bar; // 1 / (2 M_bar (3 M_bar^2 + 4))
};

Constants compute_constants(const ProblemSpec& spec,
                            std::optional<double> lambda = std::nullopt);

enum class Pattern { none, pos, neg };  // case (i) / case (ii)

std::string pattern_name(Pattern p);

struct AssumptionWitness {
  std::string condition;  // e.g. "b2+b4"
  int i = 0;              // component (1-based)
  int j = 0;              // second index when applicable (1-based, 0 = n/a)
  double t = 0.0;
  Theta theta1, theta2;
  bool has_theta = false;
  double measured = 0.0;
  std::string requirement;  // e.g. "<= 0"
};

struct AssumptionReport {
  std::string condition;  // "A2", "A3", "B1", "B2"
  bool pass = false;      // pass means pass_sampled
  std::vector<Pattern> pattern;  // per backward component
  std::optional<AssumptionWitness> witness;  // first pattern-(i) violation
  std::vector<AssumptionWitness> all_witnesses;
  std::optional<double> lambda;  // feasible lambda for B1/B2
  int points_checked = 0;

  std::string status() const { return pass ? "pass_sampled" : "fail"; }
  /// One line per component: `A3 i=2 pattern=(i) status=pass_sampled points=4096`.
  std::string to_lines() const;
};

struct SamplerConfig {
  double theta_radius = 10.0;
  int lattice_per_axis = 3;
  int random_pairs = 1000;
  std::uint64_t seed = 0x5eedULL;
  double sign_tolerance = 1e-12;   // slack on the >= 0 / <= 0 comparisons
  double affine_tolerance = 1e-12; // quotient constancy => affine coefficients
};

/// Componentwise sign patterns on f1, h1, b2 and the off-diagonal f2.
AssumptionReport check_A2(const ProblemSpec& spec,
                          const std::vector<double>& tgrid);

/// Same patterns on the mean-field-augmented quantities f1+f3, h1+h2q,
/// b2+b4, f2+f4 over tgrid x sampled (theta1, theta2) pairs.
AssumptionReport check_A3(const ProblemSpec& spec,
                          const std::vector<double>& tgrid,
                          const SamplerConfig& sampler = {});

struct LambdaSearchConfig {
  double radius = 0.0;  // 0 => default 10 K (1+T)
  int grid = 2001;
  int t_samples = 257;
  SamplerConfig sampler;  // for B2's theta pairs
};

/// One-dimensional relaxations. F0(t,y) = f1 + (b1+f2) y + b2 y^2 must be
/// one-signed at some lambda on the correct side of h1, with b2 within eps.
AssumptionReport check_B1(const ProblemSpec& spec,
                          const LambdaSearchConfig& search = {});

/// Mean-field version with F(theta1,theta2;t,y) and thresholds eps_tilde.
AssumptionReport check_B2(const ProblemSpec& spec,
                          const LambdaSearchConfig& search = {});

/// Uniform t-grid helper: count+1 nodes on [0, T].
std::vector<double> uniform_grid(double T, int count);

}  // namespace mfbsde
