#include "mfbsde/riccati.hpp"

#include <cmath>
#include <stdexcept>

namespace mfbsde {

namespace {

Vec riccati_rhs(const ProblemSpec& spec, double t, const Vec& P) {
  // dP/dt = -(b2·P) P - f2 P - b1 P - f1
  const double b2P = spec.b2(t).dot(P);
  return -b2P * P - spec.f2(t) * P - spec.b1(t) * P - spec.f1(t);
}

}  // namespace

RiccatiSolution solve_riccati(const ProblemSpec& spec, int steps, Interp interp) {
  if (steps < 2) throw std::invalid_argument("solve_riccati: steps must be >= 2");
  RiccatiSolution sol;
  sol.interp = interp;
  sol.tgrid.resize(steps + 1);
  sol.P.resize(steps + 1);
  const double h = spec.T / steps;
  for (int k = 0; k <= steps; ++k) sol.tgrid[k] = spec.T * k / steps;

  const double blowup = 1e6 * (1.0 + spec.h1.norm());
  sol.P[steps] = spec.h1;
  sol.bound = spec.h1.norm();
  for (int k = steps; k > 0; --k) {
    const double t = sol.tgrid[k];
    const Vec& p = sol.P[k];
    // classical RK4, step -h
    Vec k1 = riccati_rhs(spec, t, p);
    Vec k2 = riccati_rhs(spec, t - h / 2, p - (h / 2) * k1);
    Vec k3 = riccati_rhs(spec, t - h / 2, p - (h / 2) * k2);
    Vec k4 = riccati_rhs(spec, t - h, p - h * k3);
    sol.P[k - 1] = p - (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4);
    const double norm = sol.P[k - 1].norm();
    if (!sol.P[k - 1].allFinite() || norm > blowup)
      throw SolveError("riccati-blowup at t=" + std::to_string(sol.tgrid[k - 1]));
    sol.bound = std::max(sol.bound, norm);
  }
  return sol;
}

Vec eval_P(const RiccatiSolution& sol, double t) {
  const double T = sol.tgrid.back();
  if (t < sol.tgrid.front() - 1e-12 || t > T + 1e-12)
    throw std::out_of_range("eval_P: t outside [0, T]");
  t = std::min(std::max(t, sol.tgrid.front()), T);
  const int m = static_cast<int>(sol.tgrid.size()) - 1;
  const double h = (T - sol.tgrid.front()) / m;
  int k = std::min(m - 1, static_cast<int>((t - sol.tgrid.front()) / h));
  const double s = (t - sol.tgrid[k]) / h;
  if (s == 0.0) return sol.P[k];
  if (sol.interp == Interp::linear || m < 3)
    return (1.0 - s) * sol.P[k] + s * sol.P[k + 1];
  // Catmull-Rom style cubic with one-sided slopes at the ends.
  const Vec& p1 = sol.P[k];
  const Vec& p2 = sol.P[k + 1];
  Vec m1 = (k > 0) ? Vec(((sol.P[k + 1] - sol.P[k - 1]) / 2).eval())
                   : Vec((sol.P[1] - sol.P[0]).eval());
  Vec m2 = (k + 2 <= m) ? Vec(((sol.P[k + 2] - sol.P[k]) / 2).eval())
                        : Vec((sol.P[m] - sol.P[m - 1]).eval());
  const double s2 = s * s, s3 = s2 * s;
  return (2 * s3 - 3 * s2 + 1) * p1 + (s3 - 2 * s2 + s) * m1 +
         (-2 * s3 + 3 * s2) * p2 + (s3 - s2) * m2;
}

RiccatiResiduals midpoint_residuals(const RiccatiSolution& sol,
                                    const ProblemSpec& spec) {
  RiccatiResiduals out;
  const int m = static_cast<int>(sol.tgrid.size()) - 1;
  out.residual.resize(m);
  out.truncation_estimate.resize(m);
  for (int k = 0; k < m; ++k) {
    const double h = sol.tgrid[k + 1] - sol.tgrid[k];
    const double tm = 0.5 * (sol.tgrid[k] + sol.tgrid[k + 1]);
    const Vec pm = 0.5 * (sol.P[k] + sol.P[k + 1]);
    const Vec slope = (sol.P[k + 1] - sol.P[k]) / h;
    out.residual[k] = (slope - riccati_rhs(spec, tm, pm)).norm();
    // The midpoint defect of an exact solution is O(h^2); estimate it from
    // local divided differences (h^2 P''/8 and h^2 P'''/24) plus a roundoff
    // floor.
    Vec d2 = Vec::Zero(sol.P[k].size());
    if (k > 0 && k + 1 < m)
      d2 = sol.P[k + 1] - 2 * sol.P[k] + sol.P[k - 1];
    else if (k == 0)
      d2 = sol.P[2] - 2 * sol.P[1] + sol.P[0];
    else
      d2 = sol.P[m] - 2 * sol.P[m - 1] + sol.P[m - 2];
    double d3 = 0.0;
    if (k > 0 && k + 2 <= m)
      d3 = (sol.P[k + 2] - 3 * sol.P[k + 1] + 3 * sol.P[k] - sol.P[k - 1]).norm();
    out.truncation_estimate[k] =
        d2.norm() / 8.0 + d3 / (24.0 * h) + 1e-13 * (1.0 + pm.norm() / h);
  }
  return out;
}

}  // namespace mfbsde
