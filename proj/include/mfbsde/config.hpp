#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mfbsde/problem.hpp"

namespace mfbsde {

/// Flat `key = value` configuration with `#` comments and dotted grouping
/// (`grids.t_steps = 1000`).
class KeyValueConfig {
 public:
  static KeyValueConfig parse_file(const std::string& path);
  static KeyValueConfig parse_text(const std::string& text,
                                   const std::string& origin = "<string>");

  bool has(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& dflt = "") const;
  double get_double(const std::string& key, double dflt) const;
  int get_int(const std::string& key, int dflt) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t dflt) const;
  bool get_bool(const std::string& key, bool dflt) const;

  /// Keys matching `prefix.` with the prefix stripped.
  std::map<std::string, std::string> section(const std::string& prefix) const;
  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
  std::string origin_;
};

struct GridConfig {
  int t_steps = 1000;   // trajectory integration steps
  int t_slices = 51;    // field time slices
  double nu_min = -1.0, nu_max = 2.0;
  int nu_steps = 300;
  double x_min = -1.0, x_max = 2.0;
  int x_steps = 12;
};

struct SimConfig {
  int N = 10000;
  std::uint64_t seed = 20240 + 1;
  std::string mode = "fbode_mean";
};

struct Tolerances {
  double solver_tol = 1e-10;
  double zero_solution = 1e-8;       // criterion-1 style max |X|,|Y|,|Z|
  double cross_check = 1e-5;
  double decomposition = 1e-8;
  double gradient_rel = 1e-3;
  double residual_decay = 0.6;
  void scale_strict() {
    zero_solution /= 10; cross_check /= 10; decomposition /= 10; gradient_rel /= 10;
  }
};

struct RunConfig {
  // Problem: either a preset name with parameters, or expression coefficients.
  std::string preset;  // "example1" | "example2" | "example3" | "" (expressions)
  std::map<std::string, double> params;
  std::map<std::string, std::string> coefficient_exprs;  // b1, b2, f1, f2, b0, f0, sigma, h1, h2
  int n = 1, d = 1;
  double T = 1.0;
  std::optional<double> K;  // absent => auto from preset / required for expressions

  GridConfig grids;
  SimConfig sim;
  Tolerances tol;
  std::string out_dir = "out";
  bool strict = false;

  static RunConfig from_config(const KeyValueConfig& kv);
  /// Materializes the ProblemSpec (preset or expression-backed).
  ProblemSpec build_problem() const;
};

}  // namespace mfbsde
