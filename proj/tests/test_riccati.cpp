#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mfbsde/problem.hpp"
#include "mfbsde/riccati.hpp"

using namespace mfbsde;

namespace {

ProblemSpec scalar_spec(double b1v, double b2v, double f1v, double f2v,
                        double h1v, double T) {
  ProblemSpec spec;
  spec.T = T;
  spec.n = 1;
  spec.d = 1;
  spec.K = std::max({1.0, std::abs(b1v), std::abs(b2v), std::abs(f1v),
                     std::abs(f2v), std::abs(h1v)});
  spec.b1 = [b1v](double) { return b1v; };
  spec.b2 = [b2v](double) { return Vec::Constant(1, b2v); };
  spec.f1 = [f1v](double) { return Vec::Constant(1, f1v); };
  spec.f2 = [f2v](double) { return Mat::Constant(1, 1, f2v); };
  spec.b0 = [](double, double, const Vec&) { return 0.0; };
  spec.f0 = [](double, double, const Vec&) { return Vec::Zero(1); };
  spec.sigma = [](double, double, const Vec&, double, const Vec&) {
    return Vec::Zero(1);
  };
  spec.h1 = Vec::Constant(1, h1v);
  spec.h2 = [](double) { return Vec::Zero(1); };
  return spec;
}

}  // namespace

TEST_CASE("zero dynamics keeps P constant at h1") {
  ProblemSpec spec = scalar_spec(0, 0, 0, 0, 0.7, 1.0);
  RiccatiSolution sol = solve_riccati(spec, 100);
  for (const Vec& p : sol.P) CHECK(p[0] == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("linear closed form (example-1 coefficients)") {
  // b1 = b2 = 0, f2 = 0, f1 = 1-lambda, h1 = 1-theta:
  //   P(t) = (1-theta) + (1-lambda)(T-t)
  const double lambda = 0.25, theta = 0.5, T = 1.0;
  ProblemSpec spec = preset_example1(-1.0, lambda, theta, T);
  RiccatiSolution sol = solve_riccati(spec, 1000);
  double worst = 0.0;
  for (std::size_t k = 0; k < sol.tgrid.size(); ++k) {
    const double expect = (1 - theta) + (1 - lambda) * (T - sol.tgrid[k]);
    worst = std::max(worst, std::abs(sol.P[k][0] - expect));
  }
  CHECK(worst <= 1e-10);
  CHECK(sol.P.back()[0] == 1 - theta);  // terminal row exact
}

TEST_CASE("quadratic closed form P(t) = 1/(1+T-t)") {
  // n=1, b1=0, b2=-1, f1=0, f2=0, h1=1: dP/dt = P^2
  ProblemSpec spec = scalar_spec(0, -1, 0, 0, 1, 1.0);
  RiccatiSolution sol = solve_riccati(spec, 1000);
  double worst = 0.0;
  for (std::size_t k = 0; k < sol.tgrid.size(); ++k)
    worst = std::max(worst,
                     std::abs(sol.P[k][0] - 1.0 / (1.0 + spec.T - sol.tgrid[k])));
  CHECK(worst <= 1e-8);
}

TEST_CASE("step halving shows 4th-order convergence") {
  ProblemSpec spec = scalar_spec(0, -1, 0, 0, 1, 1.0);
  auto err = [&](int steps) {
    RiccatiSolution sol = solve_riccati(spec, steps);
    double worst = 0.0;
    for (std::size_t k = 0; k < sol.tgrid.size(); ++k)
      worst = std::max(
          worst, std::abs(sol.P[k][0] - 1.0 / (1.0 + spec.T - sol.tgrid[k])));
    return worst;
  };
  const double e1 = err(20), e2 = err(40);
  CHECK(e1 / e2 >= 8.0);
}

TEST_CASE("positivity under the (A2)(i) sign pattern") {
  for (double lambda : {0.0, 0.5, 1.0})
    for (double theta : {0.0, 0.5, 1.0}) {
      ProblemSpec spec = preset_example1(-1.0, lambda, theta, 1.0);
      RiccatiSolution sol = solve_riccati(spec, 200);
      for (const Vec& p : sol.P) CHECK(p[0] >= -1e-12);
    }
  ProblemSpec lq = preset_example3(lq_defaults());
  for (const Vec& p : solve_riccati(lq, 200).P) CHECK(p[0] >= -1e-12);
}

TEST_CASE("blow-up is detected and reported with a time") {
  // b2 = +10 (against the sign condition), h1 = 1: backward blow-up at
  // T - t = 1/10
  ProblemSpec spec = scalar_spec(0, 10, 0, 0, 1, 1.0);
  spec.K = 10;
  try {
    (void)solve_riccati(spec, 2000);
    FAIL("expected riccati-blowup");
  } catch (const SolveError& e) {
    CHECK(std::string(e.what()).find("riccati-blowup at t=") != std::string::npos);
  }
}

TEST_CASE("midpoint residual within 10x truncation estimate") {
  for (int steps : {50, 200}) {
    ProblemSpec spec = preset_example3(lq_defaults());
    RiccatiSolution sol = solve_riccati(spec, steps);
    RiccatiResiduals res = midpoint_residuals(sol, spec);
    for (std::size_t k = 0; k < res.residual.size(); ++k)
      CHECK(res.residual[k] <= 10.0 * res.truncation_estimate[k] + 1e-12);
  }
}

TEST_CASE("eval_P: nodes exact, terminal exact, interpolation sane") {
  ProblemSpec spec = preset_example1(-1.0, 0.25, 0.5, 1.0);
  RiccatiSolution sol = solve_riccati(spec, 10);
  CHECK(eval_P(sol, 1.0)[0] == sol.P.back()[0]);
  CHECK(eval_P(sol, sol.tgrid[3])[0] == sol.P[3][0]);
  // midpoint of a linear P is the neighbor average under linear interp
  const double mid = 0.5 * (sol.tgrid[4] + sol.tgrid[5]);
  CHECK(eval_P(sol, mid)[0] ==
        doctest::Approx(0.5 * (sol.P[4][0] + sol.P[5][0])).epsilon(1e-14));
  CHECK_THROWS_AS((void)eval_P(sol, -0.1), std::out_of_range);
  CHECK_THROWS_AS((void)eval_P(sol, 1.1), std::out_of_range);

  // cubic interpolation reproduces a smooth P to higher order
  ProblemSpec quad = scalar_spec(0, -1, 0, 0, 1, 1.0);
  RiccatiSolution cub = solve_riccati(quad, 50, Interp::cubic);
  const double t = 0.4321;
  CHECK(eval_P(cub, t)[0] ==
        doctest::Approx(1.0 / (1.0 + quad.T - t)).epsilon(1e-7));
}

TEST_CASE("n=2 system with coupling integrates and stays bounded") {
  ProblemSpec spec;
  spec.T = 1.0;
  spec.n = 2;
  spec.d = 1;
  spec.K = 1.0;
  spec.b1 = [](double) { return 0.1; };
  spec.b2 = [](double) { return Vec::Constant(2, -0.2); };
  spec.f1 = [](double) { return Vec::Constant(2, 0.5); };
  spec.f2 = [](double) {
    Mat m(2, 2);
    m << 0.1, 0.2, 0.3, 0.1;
    return m;
  };
  spec.b0 = [](double, double, const Vec&) { return 0.0; };
  spec.f0 = [](double, double, const Vec&) { return Vec::Zero(2); };
  spec.sigma = [](double, double, const Vec&, double, const Vec&) {
    return Vec::Zero(1);
  };
  spec.h1 = Vec::Constant(2, 0.5);
  spec.h2 = [](double) { return Vec::Zero(2); };
  RiccatiSolution sol = solve_riccati(spec, 400);
  CHECK(sol.bound < 10.0);
  CHECK((sol.P.back() - spec.h1).norm() == 0.0);
  RiccatiResiduals res = midpoint_residuals(sol, spec);
  for (std::size_t k = 0; k < res.residual.size(); ++k)
    CHECK(res.residual[k] <= 10.0 * res.truncation_estimate[k] + 1e-12);
}
