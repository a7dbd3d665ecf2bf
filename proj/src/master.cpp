#include "mfbsde/master.hpp"

#include <cmath>

namespace mfbsde {

Vec eval_U(const MasterField& mf, double t, double x, double nu) {
  return eval_P(mf.P, t) * x + mf.Phi.eval(t, nu);
}

Vec mean_value(const MasterField& mf, double t, double nu) {
  return eval_P(mf.P, t) * nu + mf.Phi.eval(t, nu);
}

Mat recover_Z(const MasterField& mf, const ProblemSpec& spec, double t,
              double x, double nu) {
  const Vec P = eval_P(mf.P, t);
  const Vec U = P * x + mf.Phi.eval(t, nu);
  const Vec ybar = mean_value(mf, t, nu);
  const Vec sig = spec.sigma(t, x, U, nu, ybar);
  return P * sig.transpose();
}

namespace {

struct GridPoint {
  int k = 0, j = 0;
  double dt = 0.0;
};

// Residual stencils are evaluated on the field grid; (t, nu) snaps to the
// nearest node and must be interior in both directions.
GridPoint locate(const FieldSolution& fs, double t, double nu) {
  const int K = static_cast<int>(fs.tgrid.size());
  const int J = fs.nnu();
  if (K < 3 || J < 3)
    throw std::invalid_argument("master_residual: field grid too small");
  GridPoint g;
  g.dt = (fs.tgrid.back() - fs.tgrid.front()) / (K - 1);
  g.k = static_cast<int>(std::lround((t - fs.tgrid.front()) / g.dt));
  const double dnu = fs.nugrid[1] - fs.nugrid[0];
  g.j = static_cast<int>(std::lround((nu - fs.nugrid.front()) / dnu));
  if (g.k <= 0 || g.k >= K - 1 || g.j <= 0 || g.j >= J - 1)
    throw std::out_of_range("master_residual: (t, nu) not interior to the grid");
  return g;
}

}  // namespace

Vec master_residual(const MasterField& mf, const ProblemSpec& spec, double t,
                    double x, double nu, const StencilConfig& stencil) {
  (void)stencil;
  const FieldSolution& fs = mf.Phi;
  const GridPoint g = locate(fs, t, nu);
  const int K = static_cast<int>(fs.tgrid.size());
  const double tk = fs.tgrid[g.k];
  const double nuj = fs.nugrid[g.j];

  // d_t U by central difference of the gridded U = P x + Phi; the row next
  // to the terminal slice uses the backward one-sided stencil to match
  // phi_pde_residual.
  const Vec Pm = eval_P(mf.P, fs.tgrid[g.k - 1]);
  const Vec P0 = eval_P(mf.P, tk);
  Vec dU_dt;
  if (g.k == K - 2) {
    dU_dt = ((P0 - Pm) * x + (fs.at(g.k, g.j) - fs.at(g.k - 1, g.j))) / g.dt;
  } else {
    const Vec Pp = eval_P(mf.P, fs.tgrid[g.k + 1]);
    dU_dt = ((Pp - Pm) * x + (fs.at(g.k + 1, g.j) - fs.at(g.k - 1, g.j))) /
            (2.0 * g.dt);
  }

  const Vec Phi = fs.at(g.k, g.j);
  const Vec U = P0 * x + Phi;
  const Vec EU = P0 * nuj + Phi;  // E[U(t, eta, nu)] by linearity
  const Vec b2 = spec.b2(tk);
  const double b1 = spec.b1(tk);
  const double b0v = spec.b0(tk, nuj, EU);
  const Vec sig = spec.sigma(tk, x, U, nuj, EU);

  const Vec term_x = P0 * (b1 * x + b2.dot(U) + b0v);       // d_x U [...]
  const Vec term_xx = Vec::Zero(spec.n) * sig.squaredNorm(); // d_xx U = 0
  const Vec dPhi_dnu = fs.d_at(g.k, g.j);
  const Vec term_nu = dPhi_dnu * (b1 * nuj + b2.dot(EU) + b0v);
  const Vec term_f = spec.f1(tk) * x + spec.f2(tk) * U + spec.f0(tk, nuj, EU);

  return dU_dt + term_x + term_xx + term_nu + term_f;
}

ResidualSplit master_residual_split(const MasterField& mf,
                                    const ProblemSpec& spec, double t,
                                    double nu, const StencilConfig& stencil) {
  (void)stencil;
  const FieldSolution& fs = mf.Phi;
  const GridPoint g = locate(fs, t, nu);
  const int K = static_cast<int>(fs.tgrid.size());
  const double tk = fs.tgrid[g.k];
  const double nuj = fs.nugrid[g.j];

  const Vec Pm = eval_P(mf.P, fs.tgrid[g.k - 1]);
  const Vec P0 = eval_P(mf.P, tk);
  Vec dP_dt, dPhi_dt;
  if (g.k == K - 2) {
    dP_dt = (P0 - Pm) / g.dt;
    dPhi_dt = (fs.at(g.k, g.j) - fs.at(g.k - 1, g.j)) / g.dt;
  } else {
    const Vec Pp = eval_P(mf.P, fs.tgrid[g.k + 1]);
    dP_dt = (Pp - Pm) / (2.0 * g.dt);
    dPhi_dt = (fs.at(g.k + 1, g.j) - fs.at(g.k - 1, g.j)) / (2.0 * g.dt);
  }

  const Vec b2 = spec.b2(tk);
  const double b1 = spec.b1(tk);
  const Mat f2 = spec.f2(tk);

  ResidualSplit split;
  split.riccati_part = dP_dt + b2.dot(P0) * P0 + f2 * P0 + b1 * P0 + spec.f1(tk);

  const Vec Phi = fs.at(g.k, g.j);
  const Vec ybar = P0 * nuj + Phi;
  const double b0v = spec.b0(tk, nuj, ybar);
  const double drift = (b1 + b2.dot(P0)) * nuj + b2.dot(Phi) + b0v;
  split.phi_part = dPhi_dt + fs.d_at(g.k, g.j) * drift + b2.dot(Phi) * P0 +
                   f2 * Phi + spec.f0(tk, nuj, ybar) + b0v * P0;
  return split;
}

}  // namespace mfbsde
