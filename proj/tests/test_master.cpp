#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mfbsde/master.hpp"
#include "mfbsde/problem.hpp"
#include "mfbsde/rng.hpp"

using namespace mfbsde;

namespace {

std::vector<double> linspace(double lo, double hi, int nodes) {
  std::vector<double> g(nodes);
  for (int i = 0; i < nodes; ++i) g[i] = lo + (hi - lo) * i / (nodes - 1);
  return g;
}

MasterField make_master(const ProblemSpec& spec, int slices, int nnodes,
                        double nu_lo, double nu_hi, int steps_per_unit = 250) {
  MasterField mf;
  mf.P = solve_riccati(spec, 1000, Interp::cubic);
  SolverConfig cfg;
  cfg.steps_per_unit = steps_per_unit;
  mf.Phi = build_field(spec, mf.P, linspace(0, spec.T, slices),
                       linspace(nu_lo, nu_hi, nnodes), cfg);
  return mf;
}

ProblemSpec zero_lq() {
  return preset_example3(
      LqCoefficients::constants(0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1));
}

}  // namespace

TEST_CASE("terminal identity U(T,x,nu) = h1 x + h2(nu) and x-affineness") {
  ProblemSpec spec = preset_example3(lq_defaults());
  MasterField mf = make_master(spec, 21, 41, -0.5, 1.5);
  for (double x : {-1.0, 0.0, 2.0})
    for (double nu : {-0.5, 0.3, 1.5}) {
      const Vec u = eval_U(mf, spec.T, x, nu);
      const Vec expect = spec.h1 * x + spec.h2(nu);
      CHECK((u - expect).lpNorm<Eigen::Infinity>() < 1e-14);
    }
  // exact affineness in x: second differences vanish identically
  for (double nu : {-0.4, 0.9}) {
    const Vec a = eval_U(mf, 0.37, -1.0, nu);
    const Vec b = eval_U(mf, 0.37, 0.5, nu);
    const Vec c = eval_U(mf, 0.37, 2.0, nu);
    CHECK(((a - 2 * b + c) - (eval_U(mf, 0.37, -1.0 + 0.0, nu) - 2 * b + c))
              .lpNorm<Eigen::Infinity>() == 0.0);
    // U(t,2x,nu) - U(t,x,nu) = P_t x exactly
    const Vec gap = eval_U(mf, 0.37, 2.0, nu) - eval_U(mf, 0.37, 1.0, nu);
    CHECK((gap - eval_P(mf.P, 0.37)).lpNorm<Eigen::Infinity>() < 1e-15);
  }
}

TEST_CASE("zero spec: U identically zero") {
  ProblemSpec spec = zero_lq();
  MasterField mf = make_master(spec, 11, 11, -1, 1, 100);
  CHECK(eval_U(mf, 0.5, 3.0, 0.5)[0] == doctest::Approx(0.0));
  CHECK(mean_value(mf, 0.5, 0.5)[0] == doctest::Approx(0.0));
  CHECK(recover_Z(mf, spec, 0.5, 3.0, 0.5)(0, 0) == doctest::Approx(0.0));
  CHECK(master_residual(mf, spec, 0.5, 3.0, 0.0)
            .lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("mean_value equals the analytic expectation; Monte-Carlo agrees") {
  ProblemSpec spec = preset_example3(lq_defaults());
  MasterField mf = make_master(spec, 21, 41, -2.0, 3.0);
  const double t = 0.4, nu = 0.7, sd = 0.5;
  const Vec analytic = mean_value(mf, t, nu);
  CHECK((analytic - (eval_P(mf.P, t) * nu + mf.Phi.eval(t, nu)))
            .lpNorm<Eigen::Infinity>() == 0.0);

  // sample eta with mean nu and average eval_U over it
  const int N = 100000;
  Vec acc = Vec::Zero(spec.n);
  for (int i = 0; i < N; ++i) {
    const double eta = nu + sd * rng::normal(42, 7, i, 0);
    acc += eval_U(mf, t, eta, nu);
  }
  acc /= N;
  // 3 standard errors of the U-average: |P| sd / sqrt(N) per component
  const double se = eval_P(mf.P, t).lpNorm<Eigen::Infinity>() * sd / std::sqrt(N);
  CHECK((acc - analytic).lpNorm<Eigen::Infinity>() <= 3.5 * se);
}

TEST_CASE("terminal mean value line: h1 nu + h2(nu)") {
  ProblemSpec spec = preset_example3(lq_defaults());
  MasterField mf = make_master(spec, 21, 41, -0.5, 1.5);
  for (double nu : {-0.25, 0.0, 1.25}) {
    const Vec mv = mean_value(mf, spec.T, nu);
    CHECK((mv - (spec.h1 * nu + spec.h2(nu))).lpNorm<Eigen::Infinity>() < 1e-13);
  }
}

TEST_CASE("recover_Z") {
  // sigma == 0 (example 1) forces Z = 0
  ProblemSpec e1 = preset_example1(-1.0, 1.0, 1.0, 1.0);
  MasterField mf1 = make_master(e1, 11, 21, -1, 1, 100);
  CHECK(recover_Z(mf1, e1, 0.3, 0.7, 0.1)(0, 0) == doctest::Approx(0.0));

  // constant sigma (example 3): Z = P sigma, deterministic in (x, nu)
  ProblemSpec e3 = preset_example3(lq_defaults());
  MasterField mf3 = make_master(e3, 21, 41, -0.5, 1.5);
  const double t = 0.6;
  const Mat z1 = recover_Z(mf3, e3, t, -1.0, 0.2);
  const Mat z2 = recover_Z(mf3, e3, t, 2.0, 1.2);
  CHECK(z1.rows() == e3.n);
  CHECK(z1.cols() == e3.d);
  CHECK(z1(0, 0) == doctest::Approx(eval_P(mf3.P, t)[0] * 0.3));
  CHECK(z1(0, 0) == doctest::Approx(z2(0, 0)));
}

TEST_CASE("decomposition: master residual = x*riccati + phi parts") {
  ProblemSpec spec = preset_example3(lq_defaults());
  MasterField mf = make_master(spec, 41, 81, -0.5, 1.5);
  const auto& fs = mf.Phi;
  double worst = 0.0;
  for (int k = 1; k + 2 < (int)fs.tgrid.size(); k += 7)
    for (int j = 1; j + 1 < fs.nnu(); j += 11) {
      const ResidualSplit split =
          master_residual_split(mf, spec, fs.tgrid[k], fs.nugrid[j]);
      for (double x : {-2.0, 0.0, 1.0, 3.0}) {
        const Vec whole =
            master_residual(mf, spec, fs.tgrid[k], x, fs.nugrid[j]);
        const Vec sum = x * split.riccati_part + split.phi_part;
        worst = std::max(worst, (whole - sum).lpNorm<Eigen::Infinity>());
      }
    }
  CHECK(worst <= 1e-8);
}

TEST_CASE("master residual decays at first order under refinement") {
  ProblemSpec spec = preset_example3(lq_defaults());
  RiccatiSolution P = solve_riccati(spec, 2000, Interp::cubic);
  SolverConfig cfg;
  cfg.steps_per_unit = 250;
  auto max_res = [&](int slices, int nnodes) {
    MasterField mf;
    mf.P = P;
    mf.Phi = build_field(spec, P, linspace(0, 1, slices),
                         linspace(0.0, 1.6, nnodes), cfg);
    double worst = 0.0;
    for (int k = 1; k + 2 < slices; ++k)
      for (int j = 1; j + 1 < nnodes; ++j)
        for (double x : {-1.0, 0.5, 2.0})
          worst = std::max(worst, master_residual(mf, spec, mf.Phi.tgrid[k], x,
                                                  mf.Phi.nugrid[j])
                                      .lpNorm<Eigen::Infinity>());
    return worst;
  };
  const double r1 = max_res(21, 21);
  const double r2 = max_res(41, 41);
  CHECK(r2 <= 0.6 * r1);
}

TEST_CASE("interior-point requirement") {
  ProblemSpec spec = preset_example3(lq_defaults());
  MasterField mf = make_master(spec, 11, 11, -0.5, 1.5, 100);
  CHECK_THROWS_AS(
      (void)master_residual(mf, spec, 0.0, 1.0, 0.5), std::out_of_range);
  CHECK_THROWS_AS(
      (void)master_residual(mf, spec, spec.T, 1.0, 0.5), std::out_of_range);
  CHECK_THROWS_AS(
      (void)master_residual(mf, spec, 0.5, 1.0, -0.5), std::out_of_range);
}
