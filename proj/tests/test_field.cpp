#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mfbsde/field.hpp"
#include "mfbsde/oracle.hpp"
#include "mfbsde/problem.hpp"
#include "mfbsde/riccati.hpp"

using namespace mfbsde;

namespace {

std::vector<double> linspace(double lo, double hi, int nodes) {
  std::vector<double> g(nodes);
  for (int i = 0; i < nodes; ++i) g[i] = lo + (hi - lo) * i / (nodes - 1);
  return g;
}

ProblemSpec homogeneous_spec(double b1v, double b2v, double f1v, double h1v) {
  // b0 = f0 = 0, h2 = 0: phi stays identically zero and the nu-equation is
  // the scalar linear ODE nu' = (b1 + b2 P) nu.
  ProblemSpec spec;
  spec.T = 1.0;
  spec.n = 1;
  spec.d = 1;
  spec.K = std::max({1.0, std::abs(b1v), std::abs(b2v), std::abs(f1v),
                     std::abs(h1v)});
  spec.b1 = [b1v](double) { return b1v; };
  spec.b2 = [b2v](double) { return Vec::Constant(1, b2v); };
  spec.f1 = [f1v](double) { return Vec::Constant(1, f1v); };
  spec.f2 = [](double) { return Mat::Zero(1, 1); };
  spec.b0 = [](double, double, const Vec&) { return 0.0; };
  spec.f0 = [](double, double, const Vec&) { return Vec::Zero(1); };
  spec.sigma = [](double, double, const Vec&, double, const Vec&) {
    return Vec::Zero(1);
  };
  spec.h1 = Vec::Constant(1, h1v);
  spec.h2 = [](double) { return Vec::Zero(1); };
  return spec;
}

ProblemSpec zero_lq() {
  return preset_example3(
      LqCoefficients::constants(0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1));
}

}  // namespace

TEST_CASE("homogeneous backward data: phi = 0 and nu is the linear flow") {
  const double b1v = 0.3, b2v = -0.5, f1v = 0.4, h1v = 0.6, nu0 = 1.7;
  ProblemSpec spec = homogeneous_spec(b1v, b2v, f1v, h1v);
  RiccatiSolution P = solve_riccati(spec, 2000, Interp::cubic);
  SolverConfig cfg;
  FbodeTrajectory traj = solve_fbode(spec, P, 0.0, nu0, cfg);
  CHECK(traj.converged);
  for (const Vec& p : traj.phi) CHECK(std::abs(p[0]) < 1e-9);

  // independent quadrature oracle: nu(s) = nu0 exp(int_0^s b1 + b2 P dr)
  // with Simpson's rule over the stored P grid
  auto integrand = [&](double t) { return b1v + b2v * eval_P(P, t)[0]; };
  for (int idx : {100, 500, 1000}) {
    const double s = traj.tgrid[idx];
    const int S = 2000;
    double acc = integrand(0.0) + integrand(s);
    for (int i = 1; i < S; ++i)
      acc += (i % 2 ? 4.0 : 2.0) * integrand(s * i / S);
    const double expect = nu0 * std::exp(acc * s / (3 * S));
    CHECK(traj.nu[idx] == doctest::Approx(expect).epsilon(1e-8));
  }
}

TEST_CASE("example 1 with alpha <= 0: zero solution from zero mean") {
  ProblemSpec spec = preset_example1(-1.0, 1.0, 1.0, 1.0);
  RiccatiSolution P = solve_riccati(spec, 1000);
  FbodeTrajectory traj = solve_fbode(spec, P, 0.0, 0.0);
  for (std::size_t i = 0; i < traj.nu.size(); ++i) {
    CHECK(std::abs(traj.nu[i]) < 1e-10);
    CHECK(std::abs(traj.phi[i][0]) < 1e-10);
  }
}

TEST_CASE("example 1 trajectory matches the expectations oracle") {
  ProblemSpec spec = preset_example1(-1.0, 1.0, 1.0, 1.0);
  RiccatiSolution P = solve_riccati(spec, 1000, Interp::cubic);
  SolverConfig cfg;
  FbodeTrajectory traj = solve_fbode(spec, P, 0.0, 1.0, cfg);
  ExpectationPath oracle =
      solve_expectation_system(spec, 1.0, traj.tgrid);
  REQUIRE(oracle.converged);
  double worst = 0.0;
  for (std::size_t i = 0; i < traj.nu.size(); ++i) {
    worst = std::max(worst, std::abs(traj.nu[i] - oracle.xbar[i]));
    const double phi_expect = oracle.ybar[i][0] - eval_P(P, traj.tgrid[i])[0] *
                                                      oracle.xbar[i];
    worst = std::max(worst, std::abs(traj.phi[i][0] - phi_expect));
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("build_field: zero spec gives the zero field") {
  ProblemSpec spec = zero_lq();
  RiccatiSolution P = solve_riccati(spec, 100);
  SolverConfig cfg;
  cfg.steps_per_unit = 100;
  FieldSolution fs = build_field(spec, P, linspace(0, 1, 11),
                                 linspace(-1, 1, 9), cfg);
  for (const Vec& v : fs.Phi) CHECK(std::abs(v[0]) < 1e-12);
  CHECK(fs.lip_estimate < 1e-12);
}

TEST_CASE("build_field: example 1 terminal row and zero column") {
  ProblemSpec spec = preset_example1(-1.0, 1.0, 1.0, 1.0);
  RiccatiSolution P = solve_riccati(spec, 500, Interp::cubic);
  SolverConfig cfg;
  cfg.steps_per_unit = 250;
  auto nugrid = linspace(-1, 1, 21);
  FieldSolution fs = build_field(spec, P, linspace(0, 1, 11), nugrid, cfg);
  // terminal slice is exactly h2
  for (int j = 0; j < fs.nnu(); ++j)
    CHECK(fs.at(10, j)[0] == spec.h2(nugrid[j])[0]);
  // Phi(t, 0) = 0 along the zero solution (nu = 0 is grid node 10)
  for (int k = 0; k < 11; ++k) CHECK(std::abs(fs.at(k, 10)[0]) < 1e-9);
  CHECK(std::isfinite(fs.lip_estimate));
}

TEST_CASE("flow property: re-solving from an intermediate state") {
  ProblemSpec spec = preset_example3(lq_defaults());
  RiccatiSolution P = solve_riccati(spec, 1000, Interp::cubic);
  SolverConfig cfg;
  cfg.steps_per_unit = 200;
  FbodeTrajectory traj = solve_fbode(spec, P, 0.0, 1.0, cfg);
  // restart at s = 0.4 from (s, nu_s): the tails must agree
  const int idx = 80;  // t = 0.4 with 200 steps on [0,1]
  const double s = traj.tgrid[idx];
  FbodeTrajectory tail = solve_fbode(spec, P, s, traj.nu[idx], cfg);
  double worst = 0.0;
  for (std::size_t i = 0; i < tail.nu.size(); ++i) {
    worst = std::max(worst, std::abs(tail.nu[i] - traj.curve.eval_nu(tail.tgrid[i])));
    worst = std::max(worst, (tail.phi[i] - traj.curve.eval_phi(tail.tgrid[i]))
                                .lpNorm<Eigen::Infinity>());
  }
  CHECK(worst <= 10 * cfg.tol * 100);  // pasting identity within solver slack
}

TEST_CASE("field flow identity Phi(s, nu_s) = phi_s on the grid") {
  ProblemSpec spec = preset_example3(lq_defaults());
  RiccatiSolution P = solve_riccati(spec, 1000, Interp::cubic);
  SolverConfig cfg;
  cfg.steps_per_unit = 250;
  auto tgrid = linspace(0, 1, 26);
  auto nugrid = linspace(0.0, 1.6, 81);
  FieldSolution fs = build_field(spec, P, tgrid, nugrid, cfg);
  FbodeTrajectory traj = solve_fbode(spec, P, 0.0, 1.0, cfg);
  double worst = 0.0;
  for (double s : tgrid) {
    const double nu_s = traj.curve.eval_nu(s);
    const Vec phi_s = traj.curve.eval_phi(s);
    worst = std::max(worst, (fs.eval(s, nu_s) - phi_s).lpNorm<Eigen::Infinity>());
  }
  CHECK(worst <= 10 * cfg.tol * 10);
}

TEST_CASE("variational solve: homogeneous case has grad_phi = 0") {
  ProblemSpec spec = homogeneous_spec(0.3, -0.5, 0.4, 0.6);
  RiccatiSolution P = solve_riccati(spec, 1000, Interp::cubic);
  FbodeTrajectory traj = solve_fbode(spec, P, 0.0, 1.0);
  VariationalSolution vs = solve_variational(spec, P, traj);
  CHECK(std::abs(vs.grad_phi.front()[0]) < 1e-9);
  CHECK(std::abs(vs.grad_phi.back()[0]) < 1e-9);
  // grad_nu(T) = exp(int b1 + b2 P): compare against the trajectory itself,
  // which solves the same linear ODE from nu0 = 1
  FbodeTrajectory unit = solve_fbode(spec, P, 0.0, 1.0);
  CHECK(vs.grad_nu.back() ==
        doctest::Approx(unit.nu.back() / unit.nu.front()).epsilon(1e-8));
}

TEST_CASE("variational solve matches central differences of Phi") {
  for (ProblemSpec spec :
       {preset_example1(-1.0, 1.0, 1.0, 1.0), preset_example3(lq_defaults())}) {
    RiccatiSolution P = solve_riccati(spec, 1000, Interp::cubic);
    SolverConfig cfg;
    cfg.steps_per_unit = 500;
    const double t0 = 0.3, nu0 = 0.8, h = 1e-4;
    FbodeTrajectory traj = solve_fbode(spec, P, t0, nu0, cfg);
    VariationalSolution vs = solve_variational(spec, P, traj, cfg);
    FbodeTrajectory up = solve_fbode(spec, P, t0, nu0 + h, cfg);
    FbodeTrajectory dn = solve_fbode(spec, P, t0, nu0 - h, cfg);
    const double fd = (up.phi.front()[0] - dn.phi.front()[0]) / (2 * h);
    const double got = vs.grad_phi.front()[0];
    CHECK(std::abs(got - fd) <= 1e-3 * std::max(std::abs(fd), 1e-6));
  }
}

TEST_CASE("affine problem: dPhi/dnu constant across nu") {
  ProblemSpec spec = preset_example1(-1.0, 1.0, 1.0, 1.0);
  RiccatiSolution P = solve_riccati(spec, 500, Interp::cubic);
  SolverConfig cfg;
  cfg.steps_per_unit = 250;
  double ref = 0.0;
  bool first = true;
  for (double nu0 : {-0.5, 0.2, 1.0}) {
    FbodeTrajectory traj = solve_fbode(spec, P, 0.0, nu0, cfg);
    VariationalSolution vs = solve_variational(spec, P, traj, cfg);
    if (first) {
      ref = vs.grad_phi.front()[0];
      first = false;
    } else {
      CHECK(vs.grad_phi.front()[0] == doctest::Approx(ref).epsilon(1e-8));
    }
  }
}

TEST_CASE("phi pde residual: zero spec exactly zero, stencils flagged") {
  ProblemSpec spec = zero_lq();
  RiccatiSolution P = solve_riccati(spec, 100);
  SolverConfig cfg;
  cfg.steps_per_unit = 100;
  auto tgrid = linspace(0, 1, 11);
  auto nugrid = linspace(-1, 1, 11);
  FieldSolution fs = build_field(spec, P, tgrid, nugrid, cfg);
  PdeResidual res = phi_pde_residual(fs, spec, P, tgrid[5], nugrid[5]);
  CHECK(std::abs(res.residual[0]) < 1e-12);
  CHECK_FALSE(res.one_sided);
  PdeResidual edge = phi_pde_residual(fs, spec, P, tgrid[9], nugrid[5]);
  CHECK(edge.one_sided);  // row next to the terminal slice
  CHECK_THROWS_AS((void)phi_pde_residual(fs, spec, P, tgrid[0], nugrid[5]),
                  std::out_of_range);
  CHECK_THROWS_AS((void)phi_pde_residual(fs, spec, P, tgrid[10], nugrid[5]),
                  std::out_of_range);
  CHECK_THROWS_AS((void)phi_pde_residual(fs, spec, P, tgrid[5], nugrid[0]),
                  std::out_of_range);
}

TEST_CASE("phi pde residual decays under grid refinement") {
  ProblemSpec spec = preset_example3(lq_defaults());
  RiccatiSolution P = solve_riccati(spec, 2000, Interp::cubic);
  SolverConfig cfg;
  cfg.steps_per_unit = 250;
  auto max_res = [&](int slices, int nnodes) {
    auto tgrid = linspace(0, 1, slices);
    auto nugrid = linspace(0.0, 1.6, nnodes);
    FieldSolution fs = build_field(spec, P, tgrid, nugrid, cfg);
    double worst = 0.0;
    for (int k = 1; k + 2 < slices; ++k)
      for (int j = 1; j + 1 < nnodes; ++j)
        worst = std::max(worst,
                         phi_pde_residual(fs, spec, P, tgrid[k], nugrid[j])
                             .residual.lpNorm<Eigen::Infinity>());
    return worst;
  };
  const double r1 = max_res(21, 21);
  const double r2 = max_res(41, 41);
  CHECK(r2 <= 0.6 * r1);  // at least first-order decay (central: ~1/4)
}

TEST_CASE("pasting consistency: forced two-window solve matches direct") {
  ProblemSpec spec = preset_example3(lq_defaults());
  RiccatiSolution P = solve_riccati(spec, 1000, Interp::cubic);
  SolverConfig direct_cfg;
  direct_cfg.steps_per_unit = 200;
  FbodeTrajectory direct = solve_fbode(spec, P, 0.0, 1.0, direct_cfg);
  SolverConfig win_cfg = direct_cfg;
  win_cfg.window = 0.5;  // forces two pasted windows
  win_cfg.slice_nodes = 65;
  FbodeTrajectory pasted = solve_fbode(spec, P, 0.0, 1.0, win_cfg);
  CHECK(pasted.windows >= 2);
  double worst = 0.0;
  for (std::size_t i = 0; i < pasted.tgrid.size(); ++i) {
    worst = std::max(worst,
                     std::abs(pasted.nu[i] - direct.curve.eval_nu(pasted.tgrid[i])));
    worst = std::max(worst, (pasted.phi[i] - direct.curve.eval_phi(pasted.tgrid[i]))
                                .lpNorm<Eigen::Infinity>());
  }
  CHECK(worst <= 1e-7);  // slice interpolation is exact for the affine field
}

TEST_CASE("nu extrapolation is linear and flagged") {
  ProblemSpec spec = preset_example1(-1.0, 1.0, 1.0, 1.0);
  RiccatiSolution P = solve_riccati(spec, 200, Interp::cubic);
  SolverConfig cfg;
  cfg.steps_per_unit = 100;
  auto nugrid = linspace(-1, 1, 21);
  FieldSolution fs = build_field(spec, P, linspace(0, 1, 6), nugrid, cfg);
  bool ext = false;
  const Vec inside = fs.eval(0.5, 0.9, &ext);
  CHECK_FALSE(ext);
  const Vec outside = fs.eval(0.5, 1.5, &ext);
  CHECK(ext);
  // linear continuation of the last two nodes (field affine in nu anyway)
  const Vec a = fs.eval(0.5, 0.8), b = fs.eval(0.5, 1.0);
  CHECK(outside[0] ==
        doctest::Approx(b[0] + (1.5 - 1.0) / 0.2 * (b[0] - a[0])).epsilon(1e-9));
  (void)inside;
}

TEST_CASE("divergence reporting: stiff problem either solves via windows or throws") {
  // strongly coupled forward-backward pair on a long horizon
  ProblemSpec spec = homogeneous_spec(0.0, 0.0, 0.0, 0.0);
  spec.T = 3.0;
  spec.K = 2.0;
  spec.b0 = [](double, double, const Vec& ybar) { return -2.0 * ybar[0]; };
  spec.f0 = [](double, double xbar, const Vec&) {
    return Vec::Constant(1, 2.0 * xbar);
  };
  spec.h2 = [](double xbar) { return Vec::Constant(1, xbar); };
  RiccatiSolution P = solve_riccati(spec, 3000);
  SolverConfig cfg;
  cfg.steps_per_unit = 200;
  cfg.max_iter = 60;
  try {
    FbodeTrajectory traj = solve_fbode(spec, P, 0.0, 1.0, cfg);
    CHECK(traj.converged);  // windows rescued it
  } catch (const SolveError& e) {
    CHECK(std::string(e.what()).find("fbode-divergence") != std::string::npos);
  }
}
