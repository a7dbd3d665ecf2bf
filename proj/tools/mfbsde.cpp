// Command-line front end: configuration parsing, one subcommand per pipeline
// stage, CSV and plain-text report emission.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "mfbsde/assumptions.hpp"
#include "mfbsde/config.hpp"
#include "mfbsde/cross_check.hpp"
#include "mfbsde/csv.hpp"
#include "mfbsde/field.hpp"
#include "mfbsde/master.hpp"
#include "mfbsde/oracle.hpp"
#include "mfbsde/particles.hpp"
#include "mfbsde/problem.hpp"
#include "mfbsde/riccati.hpp"

namespace fs = std::filesystem;
using namespace mfbsde;

namespace {

struct CliOptions {
  std::string config_path;
  std::string out_dir = "out";
  std::optional<std::uint64_t> seed;
  bool strict = false;
  std::string preset;
  std::map<std::string, double> params;
  std::optional<double> T;
  std::optional<double> nu0;
  std::optional<int> t_steps, t_slices, nu_steps, N;
  std::optional<double> nu_min, nu_max;
  std::string mode;
};

RunConfig make_run_config(const CliOptions& cli) {
  RunConfig rc;
  if (!cli.config_path.empty())
    rc = RunConfig::from_config(KeyValueConfig::parse_file(cli.config_path));
  if (!cli.preset.empty()) rc.preset = cli.preset;
  for (const auto& [k, v] : cli.params) rc.params[k] = v;
  if (cli.T) rc.T = *cli.T;
  if (cli.t_steps) rc.grids.t_steps = *cli.t_steps;
  if (cli.t_slices) rc.grids.t_slices = *cli.t_slices;
  if (cli.nu_steps) rc.grids.nu_steps = *cli.nu_steps;
  if (cli.nu_min) rc.grids.nu_min = *cli.nu_min;
  if (cli.nu_max) rc.grids.nu_max = *cli.nu_max;
  if (cli.N) rc.sim.N = *cli.N;
  if (cli.seed) rc.sim.seed = *cli.seed;
  if (!cli.mode.empty()) rc.sim.mode = cli.mode;
  if (cli.strict && !rc.strict) {
    rc.strict = true;
    rc.tol.scale_strict();
  }
  rc.out_dir = cli.out_dir;
  return rc;
}

void add_common_flags(CLI::App* cmd, CliOptions& cli) {
  cmd->add_option("--config", cli.config_path, "configuration file (key = value lines)");
  cmd->add_option("--out", cli.out_dir, "output directory");
  cmd->add_option("--seed", cli.seed, "simulation seed");
  cmd->add_flag("--strict", cli.strict, "tighten all tolerances by 10x");
  cmd->add_option("--preset", cli.preset, "problem preset (example1|example2|example3)");
  cmd->add_option("--T", cli.T, "time horizon");
  cmd->add_option("--nu0", cli.nu0, "initial mean");
  cmd->add_option("--t-steps", cli.t_steps, "trajectory integration steps");
  cmd->add_option("--t-slices", cli.t_slices, "field time slices");
  cmd->add_option("--nu-min", cli.nu_min, "field nu range lower bound");
  cmd->add_option("--nu-max", cli.nu_max, "field nu range upper bound");
  cmd->add_option("--nu-steps", cli.nu_steps, "field nu intervals");
  cmd->add_option("--N", cli.N, "particle count");
  cmd->add_option("--mode", cli.mode, "mean source: fbode_mean|empirical_mean");
  for (const char* p : {"alpha", "beta", "lambda", "theta", "A", "Abar", "B",
                        "Bbar", "Q", "Qbar", "R", "Rbar", "G", "Gbar", "sigma"}) {
    cmd->add_option_function<double>(
        std::string("--") + p,
        [&cli, key = std::string(p)](double v) { cli.params[key] = v; },
        std::string("preset parameter ") + p);
  }
}

std::vector<double> linspace(double lo, double hi, int nodes) {
  std::vector<double> g(nodes);
  for (int i = 0; i < nodes; ++i) g[i] = lo + (hi - lo) * i / (nodes - 1);
  return g;
}

double pick_nu0(const RunConfig& rc, const CliOptions& cli) {
  if (cli.nu0) return *cli.nu0;
  return rc.preset == "example3" ? 1.0 : 0.0;
}

struct CheckOutcome {
  ValidationReport validation;
  AssumptionReport a2, a3;
  std::optional<AssumptionReport> b1, b2;
  Constants constants;
  bool assumptions_pass = false;
};

CheckOutcome run_checks(const ProblemSpec& spec, SummaryReport& summary,
                        const std::string& out_dir) {
  CheckOutcome oc;
  oc.validation = validate_spec(spec);
  auto tgrid = uniform_grid(spec.T, 256);
  oc.a2 = check_A2(spec, tgrid);
  oc.a3 = check_A3(spec, tgrid);
  if (spec.n == 1) {
    oc.b1 = check_B1(spec);
    oc.b2 = check_B2(spec);
  }
  oc.constants = compute_constants(
      spec, oc.b1 && oc.b1->pass ? oc.b1->lambda : std::nullopt);
  oc.assumptions_pass = oc.validation.pass && oc.a2.pass && oc.a3.pass;

  std::string report;
  report += "A1 status=" + std::string(oc.validation.pass ? "pass_sampled" : "fail") +
            " points=" + std::to_string(oc.validation.points_checked) +
            " resolution=" + CsvWriter::format(oc.validation.resolution) + "\n";
  for (const auto& v : oc.validation.violations)
    report += "A1 violation: " + v.condition + " at " + v.point +
              " value=" + CsvWriter::format(v.measured) +
              " threshold=" + CsvWriter::format(v.threshold) + "\n";
  report += oc.a2.to_lines();
  report += oc.a3.to_lines();
  if (oc.b1) report += oc.b1->to_lines();
  if (oc.b2) report += oc.b2->to_lines();
  report += "constants M=" + CsvWriter::format(oc.constants.M) +
            " delta=" + CsvWriter::format(oc.constants.delta) +
            " eps=" + CsvWriter::format(oc.constants.eps) +
            " eps_tilde=" + CsvWriter::format(oc.constants.eps_tilde) +
            " m=" + std::to_string(oc.constants.m) +
            " lip_interval=" + CsvWriter::format(oc.constants.lip_interval) +
            " lip_global=" + CsvWriter::format(oc.constants.lip_global) + "\n";
  std::ofstream f(out_dir + "/check_report.txt", std::ios::binary);
  f << report;

  summary.add("validation", oc.validation.pass ? "pass" : "fail");
  summary.add("A2", oc.a2.status());
  summary.add("A3", oc.a3.status());
  if (oc.b1) {
    summary.add("B1", oc.b1->status());
    if (oc.b1->lambda) summary.add("B1_lambda", *oc.b1->lambda);
  }
  if (oc.b2) summary.add("B2", oc.b2->status());
  if (!oc.a3.pass && oc.a3.witness) {
    const auto& w = *oc.a3.witness;
    summary.add("assumptions", "fail A3");
    summary.add("A3_witness", w.condition + "=" + CsvWriter::format(w.measured) +
                                  " requires " + w.requirement);
  } else if (!oc.a2.pass && oc.a2.witness) {
    const auto& w = *oc.a2.witness;
    summary.add("assumptions", "fail A2");
    summary.add("A2_witness", w.condition + "=" + CsvWriter::format(w.measured) +
                                  " requires " + w.requirement);
  } else if (!oc.validation.pass) {
    summary.add("assumptions", "fail A1");
  } else {
    summary.add("assumptions", "pass");
  }
  return oc;
}

void write_riccati_csv(const RiccatiSolution& P, int n, const std::string& path) {
  CsvWriter csv(path);
  std::vector<std::string> cols = {"t"};
  for (int i = 1; i <= n; ++i) cols.push_back("P_" + std::to_string(i));
  csv.header(cols);
  for (std::size_t k = 0; k < P.tgrid.size(); ++k) csv.row({P.tgrid[k]}, P.P[k]);
}

void write_field_csv(const FieldSolution& fsol, int n, const std::string& path) {
  CsvWriter csv(path);
  std::vector<std::string> cols = {"t", "nu"};
  for (int i = 1; i <= n; ++i) cols.push_back("Phi_" + std::to_string(i));
  for (int i = 1; i <= n; ++i) cols.push_back("dPhi_" + std::to_string(i));
  csv.header(cols);
  for (std::size_t k = 0; k < fsol.tgrid.size(); ++k)
    for (int j = 0; j < fsol.nnu(); ++j) {
      Vec both(2 * n);
      both << fsol.at(static_cast<int>(k), j), fsol.d_at(static_cast<int>(k), j);
      csv.row({fsol.tgrid[k], fsol.nugrid[j]}, both);
    }
}

void write_oracle_csv(const ExpectationPath& path, int n, const std::string& file) {
  CsvWriter csv(file);
  std::vector<std::string> cols = {"t", "xbar"};
  for (int i = 1; i <= n; ++i) cols.push_back("ybar_" + std::to_string(i));
  csv.header(cols);
  for (std::size_t k = 0; k < path.tgrid.size(); ++k)
    csv.row({path.tgrid[k], path.xbar[k]}, path.ybar[k]);
}

void write_particles_csv(const SimulationOutput& out, const ProblemSpec& spec,
                         const std::string& file) {
  CsvWriter csv(file);
  std::vector<std::string> cols = {"t", "particle", "X"};
  for (int i = 1; i <= spec.n; ++i) cols.push_back("Y_" + std::to_string(i));
  csv.header(cols);
  if (!out.ensemble.paths_stored) {
    csv.raw_line("# paths not stored (N over cap); aggregates in summary");
    return;
  }
  const int steps = static_cast<int>(out.ensemble.tgrid.size()) - 1;
  const int nsub = std::min(out.ensemble.N, 8);
  const int stride = std::max(1, steps / 100);
  for (int p = 0; p < nsub; ++p)
    for (int k = 0; k <= steps; k += stride) {
      const double x = out.ensemble.X[static_cast<std::size_t>(p) * (steps + 1) + k];
      const Vec y = out.P_path[k] * x + out.Phi_path[k];
      csv.row({out.ensemble.tgrid[k], double(p), x}, y);
    }
}

struct ResidualMapResult {
  double max_residual = 0.0;
  double mean_residual = 0.0;
  double max_decomposition_gap = 0.0;
};

ResidualMapResult write_residual_map(const MasterField& mf,
                                     const ProblemSpec& spec,
                                     const GridConfig& grids,
                                     const std::string& file) {
  CsvWriter csv(file);
  std::vector<std::string> cols = {"t", "x", "nu"};
  for (int i = 1; i <= spec.n; ++i) cols.push_back("res_" + std::to_string(i));
  csv.header(cols);
  ResidualMapResult rr;
  const auto& fsol = mf.Phi;
  const int K = static_cast<int>(fsol.tgrid.size());
  const int J = fsol.nnu();
  const auto xgrid = linspace(grids.x_min, grids.x_max, grids.x_steps + 1);
  double total = 0.0;
  long count = 0;
  for (int k = 1; k + 2 < K; ++k)  // strictly central rows
    for (int j = 1; j + 1 < J; ++j) {
      const double t = fsol.tgrid[k], nu = fsol.nugrid[j];
      const ResidualSplit split = master_residual_split(mf, spec, t, nu);
      for (double x : xgrid) {
        const Vec res = master_residual(mf, spec, t, x, nu);
        const double mag = res.lpNorm<Eigen::Infinity>();
        rr.max_residual = std::max(rr.max_residual, mag);
        total += mag;
        ++count;
        const Vec recomposed = x * split.riccati_part + split.phi_part;
        rr.max_decomposition_gap = std::max(
            rr.max_decomposition_gap, (res - recomposed).lpNorm<Eigen::Infinity>());
        csv.row({t, x, nu}, res);
      }
    }
  rr.mean_residual = count ? total / count : 0.0;
  csv.raw_line("# max_residual=" + CsvWriter::format(rr.max_residual) +
               " mean_residual=" + CsvWriter::format(rr.mean_residual));
  return rr;
}

int finish(SummaryReport& summary, const std::string& out_dir) {
  summary.write(out_dir + "/summary.txt");
  std::cout << summary.render();
  return summary.passing() ? 0 : 1;
}

MasterField build_master(const ProblemSpec& spec, const RunConfig& rc) {
  MasterField mf;
  mf.P = solve_riccati(spec, rc.grids.t_steps, Interp::cubic);
  SolverConfig scfg;
  scfg.tol = rc.tol.solver_tol;
  // Grid solves use the 4th-order sweep integrator; 250 nodes per unit time
  // already puts the integration error far below solver tolerance.
  scfg.steps_per_unit = std::max(2, std::min(250, int(rc.grids.t_steps / spec.T)));
  auto tgrid = linspace(0.0, spec.T, rc.grids.t_slices);
  auto nugrid = linspace(rc.grids.nu_min, rc.grids.nu_max, rc.grids.nu_steps + 1);
  mf.Phi = build_field(spec, mf.P, tgrid, nugrid, scfg);
  return mf;
}

int cmd_check(const CliOptions& cli) {
  RunConfig rc = make_run_config(cli);
  ProblemSpec spec = rc.build_problem();
  fs::create_directories(rc.out_dir);
  SummaryReport summary;
  summary.add("problem", spec.name.empty() ? std::string("config") : spec.name);
  run_checks(spec, summary, rc.out_dir);
  return finish(summary, rc.out_dir);
}

int cmd_riccati(const CliOptions& cli) {
  RunConfig rc = make_run_config(cli);
  ProblemSpec spec = rc.build_problem();
  fs::create_directories(rc.out_dir);
  SummaryReport summary;
  RiccatiSolution P = solve_riccati(spec, rc.grids.t_steps);
  write_riccati_csv(P, spec.n, rc.out_dir + "/riccati.csv");
  summary.add("riccati_bound", P.bound);
  summary.add("riccati_steps", (long long)rc.grids.t_steps);
  return finish(summary, rc.out_dir);
}

int cmd_field(const CliOptions& cli) {
  RunConfig rc = make_run_config(cli);
  ProblemSpec spec = rc.build_problem();
  fs::create_directories(rc.out_dir);
  SummaryReport summary;
  MasterField mf = build_master(spec, rc);
  write_riccati_csv(mf.P, spec.n, rc.out_dir + "/riccati.csv");
  write_field_csv(mf.Phi, spec.n, rc.out_dir + "/field.csv");
  summary.add("field_lip_estimate", mf.Phi.lip_estimate);
  return finish(summary, rc.out_dir);
}

int cmd_simulate(const CliOptions& cli) {
  RunConfig rc = make_run_config(cli);
  ProblemSpec spec = rc.build_problem();
  fs::create_directories(rc.out_dir);
  SummaryReport summary;
  MasterField mf = build_master(spec, rc);
  const double nu0 = pick_nu0(rc, cli);
  const MeanMode mode = rc.sim.mode == "empirical_mean" ? MeanMode::empirical_mean
                                                        : MeanMode::fbode_mean;
  SimulationOutput out = simulate(spec, mf, nu0, InitLaw::point(nu0), rc.sim.N,
                                  rc.grids.t_steps, rc.sim.seed, mode);
  write_particles_csv(out, spec, rc.out_dir + "/particles.csv");
  summary.add("mean_gap", out.mean_gap);
  summary.add("bsde_rms", out.bsde_rms);
  summary.add("bsde_step_rms", out.bsde.step_rms);
  summary.add("terminal_gap", out.bsde.terminal_gap);
  summary.add("max_abs_X", out.max_abs_X);
  summary.add("max_abs_Y", out.max_abs_Y);
  summary.add("max_abs_Z", out.max_abs_Z);
  return finish(summary, rc.out_dir);
}

// Full pipeline: checks; on assumption failure a non-uniqueness probe, else
// riccati + field + oracle cross-check + residual map + simulation.
int run_verify_pipeline(const RunConfig& rc, double nu0) {
  ProblemSpec spec = rc.build_problem();
  fs::create_directories(rc.out_dir);
  SummaryReport summary;
  summary.add("problem", spec.name.empty() ? std::string("config") : spec.name);
  CheckOutcome oc = run_checks(spec, summary, rc.out_dir);

  if (!oc.assumptions_pass) {
    try {
      auto tg = uniform_grid(spec.T, rc.grids.t_steps);
      OracleConfig ocfg;
      ocfg.tol = rc.tol.solver_tol;
      ExpectationPath probe = solve_expectation_system(spec, nu0, tg, ocfg);
      summary.add("oracle_multiple_fixed_points",
                  probe.multiple_fixed_points ? "yes" : "no");
      summary.add("oracle_fixed_point_gap", probe.fixed_point_gap);
    } catch (const SolveError& e) {
      summary.add("oracle_multiple_fixed_points", "divergence");
      summary.add("oracle_error", e.what());
    }
    summary.add("solvable", "no");
    return finish(summary, rc.out_dir);
  }

  MasterField mf = build_master(spec, rc);
  write_riccati_csv(mf.P, spec.n, rc.out_dir + "/riccati.csv");
  write_field_csv(mf.Phi, spec.n, rc.out_dir + "/field.csv");
  summary.add("field_lip_estimate", mf.Phi.lip_estimate);

  auto tg = uniform_grid(spec.T, rc.grids.t_steps);
  OracleConfig ocfg;
  ocfg.tol = rc.tol.solver_tol;
  ExpectationPath path = solve_expectation_system(spec, nu0, tg, ocfg);
  write_oracle_csv(path, spec.n, rc.out_dir + "/oracle.csv");
  const double cc = cross_check(spec, mf.P, mf.Phi, path);
  summary.threshold("cross_check", cc, rc.tol.cross_check, cc <= rc.tol.cross_check);

  ResidualMapResult rr =
      write_residual_map(mf, spec, rc.grids, rc.out_dir + "/residuals.csv");
  summary.add("master_residual_max", rr.max_residual);
  summary.add("master_residual_mean", rr.mean_residual);
  summary.threshold("decomposition_gap", rr.max_decomposition_gap,
                    rc.tol.decomposition,
                    rr.max_decomposition_gap <= rc.tol.decomposition);

  const MeanMode mode = rc.sim.mode == "empirical_mean" ? MeanMode::empirical_mean
                                                        : MeanMode::fbode_mean;
  SimulationOutput out = simulate(spec, mf, nu0, InitLaw::point(nu0), rc.sim.N,
                                  rc.grids.t_steps, rc.sim.seed, mode);
  write_particles_csv(out, spec, rc.out_dir + "/particles.csv");
  summary.add("mean_gap", out.mean_gap);
  summary.add("bsde_rms", out.bsde_rms);
  summary.add("terminal_gap", out.bsde.terminal_gap);
  summary.add("max_abs_X", out.max_abs_X);
  summary.add("max_abs_Y", out.max_abs_Y);
  summary.add("max_abs_Z", out.max_abs_Z);

  // When the mean dynamics is the zero solution the whole ensemble must be.
  double path_mag = 0.0;
  for (double nu : out.nu_path) path_mag = std::max(path_mag, std::abs(nu));
  if (nu0 == 0.0 && path_mag <= 10 * rc.tol.solver_tol) {
    const double worst = std::max({out.max_abs_X, out.max_abs_Y, out.max_abs_Z});
    summary.threshold("zero_solution_max", worst, rc.tol.zero_solution,
                      worst <= rc.tol.zero_solution);
  }
  return finish(summary, rc.out_dir);
}

int cmd_verify(const CliOptions& cli) {
  RunConfig rc = make_run_config(cli);
  return run_verify_pipeline(rc, pick_nu0(rc, cli));
}

int cmd_example(int which, CliOptions& cli) {
  cli.preset = "example" + std::to_string(which);
  RunConfig rc = make_run_config(cli);
  auto ensure = [&](const char* k, double v) {
    if (!rc.params.count(k)) rc.params[k] = v;
  };
  if (which == 1 || which == 2) {
    ensure("alpha", -1.0);
    ensure("lambda", 1.0);
    ensure("theta", 1.0);
    if (which == 2) ensure("beta", 0.5);
  }
  return run_verify_pipeline(rc, pick_nu0(rc, cli));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mean-field FBSDE decoupling-field toolkit"};
  app.require_subcommand(1);

  CliOptions cli_check, cli_riccati, cli_field, cli_sim, cli_verify, cli_example;
  int example_no = 1;

  auto* c1 = app.add_subcommand("check", "validate coefficients and assumptions");
  add_common_flags(c1, cli_check);
  auto* c2 = app.add_subcommand("riccati", "solve the backward Riccati equation");
  add_common_flags(c2, cli_riccati);
  auto* c3 = app.add_subcommand("field", "build the decoupling field grid");
  add_common_flags(c3, cli_field);
  auto* c4 = app.add_subcommand("simulate", "run the particle system");
  add_common_flags(c4, cli_sim);
  auto* c5 = app.add_subcommand(
      "verify", "master residual map + oracle cross-check + BSDE residual");
  add_common_flags(c5, cli_verify);
  auto* c6 = app.add_subcommand("example", "full pipeline on a built-in example");
  c6->add_option("number", example_no, "example number (1, 2 or 3)")
      ->required()
      ->check(CLI::Range(1, 3));
  add_common_flags(c6, cli_example);

  CLI11_PARSE(app, argc, argv);

  try {
    if (c1->parsed()) return cmd_check(cli_check);
    if (c2->parsed()) return cmd_riccati(cli_riccati);
    if (c3->parsed()) return cmd_field(cli_field);
    if (c4->parsed()) return cmd_simulate(cli_sim);
    if (c5->parsed()) return cmd_verify(cli_verify);
    if (c6->parsed()) return cmd_example(example_no, cli_example);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 2;
  }
  return 2;
}
