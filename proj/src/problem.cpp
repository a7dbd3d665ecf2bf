#include "mfbsde/problem.hpp"

#include <cmath>
#include <sstream>

#include "mfbsde/rng.hpp"

namespace mfbsde {

namespace {

std::string point_str(double t, double xbar, const Vec& ybar) {
  std::ostringstream os;
  os << "t=" << t << " xbar=" << xbar << " ybar=[";
  for (Eigen::Index i = 0; i < ybar.size(); ++i)
    os << (i ? "," : "") << ybar[i];
  os << "]";
  return os.str();
}

void require_finite(double v, const std::string& what, const std::string& at) {
  if (!std::isfinite(v))
    throw EvaluatorError(what + " returned non-finite value at " + at);
}

void require_finite(const Vec& v, const std::string& what, const std::string& at) {
  if (!v.allFinite())
    throw EvaluatorError(what + " returned non-finite value at " + at);
}

}  // namespace

ValidationReport validate_spec(const ProblemSpec& spec,
                               const ValidationGridConfig& grid) {
  if (spec.T <= 0 || spec.n < 1 || spec.d < 1 || spec.K <= 0)
    throw std::invalid_argument("ProblemSpec: need T > 0, n >= 1, d >= 1, K > 0");
  ValidationReport report;
  const double bound = spec.K * (1.0 + grid.tolerance);
  auto violation = [&](const std::string& cond, const std::string& at,
                       double measured, double threshold) {
    report.violations.push_back({cond, at, measured, threshold});
    report.pass = false;
  };

  // Boundedness of the t-only coefficients and h1.
  const double dt = spec.T / std::max(1, grid.t_samples - 1);
  report.resolution = dt;
  for (int k = 0; k < grid.t_samples; ++k) {
    const double t = std::min(spec.T, k * dt);
    std::string at = "t=" + std::to_string(t);
    double v1 = spec.b1(t);
    Vec v2 = spec.b2(t), v3 = spec.f1(t);
    Mat v4 = spec.f2(t);
    require_finite(v1, "b1", at);
    require_finite(v2, "b2", at);
    require_finite(v3, "f1", at);
    require_finite(Vec(v4.reshaped()), "f2", at);
    if (std::abs(v1) > bound) violation("b1-bound", at, std::abs(v1), spec.K);
    if (v2.norm() > bound) violation("b2-bound", at, v2.norm(), spec.K);
    if (v3.norm() > bound) violation("f1-bound", at, v3.norm(), spec.K);
    if (v4.norm() > bound) violation("f2-bound", at, v4.norm(), spec.K);
    ++report.points_checked;
  }
  if (spec.h1.norm() > bound)
    violation("h1-bound", "h1", spec.h1.norm(), spec.K);

  // Lipschitz difference quotients on lattice + random pairs.
  std::vector<std::pair<double, Vec>> thetas;
  const int L = std::max(2, grid.lattice_per_axis);
  for (int a = 0; a < L; ++a) {
    double xb = -grid.theta_radius + 2.0 * grid.theta_radius * a / (L - 1);
    for (int b = 0; b < L; ++b) {
      double yb = -grid.theta_radius + 2.0 * grid.theta_radius * b / (L - 1);
      Vec y = Vec::Constant(spec.n, yb);
      // stagger components so multi-dimensional specs see distinct entries
      for (int i = 1; i < spec.n; ++i) y[i] = yb * (1.0 - 0.25 * i / spec.n);
      thetas.emplace_back(xb, y);
    }
  }
  for (int r = 0; r < grid.random_pairs; ++r) {
    double xb = (rng::uniform01(rng::key(grid.seed, 1, r, 0)) * 2 - 1) * grid.theta_radius;
    Vec y(spec.n);
    for (int i = 0; i < spec.n; ++i)
      y[i] = (rng::uniform01(rng::key(grid.seed, 2, r, i)) * 2 - 1) * grid.theta_radius;
    thetas.emplace_back(xb, y);
  }

  const int t_probe = std::max(2, grid.t_samples / 4);
  for (int k = 0; k < t_probe; ++k) {
    const double t = spec.T * k / (t_probe - 1);
    for (std::size_t i = 0; i + 1 < thetas.size(); i += 2) {
      const auto& [x1, y1] = thetas[i];
      const auto& [x2, y2] = thetas[i + 1];
      const double dx = std::abs(x1 - x2);
      const double dy = (y1 - y2).norm();
      const double denom = dx + dy;
      if (denom < 1e-14) continue;
      std::string at = point_str(t, x1, y1) + " vs " + point_str(t, x2, y2);

      double b0a = spec.b0(t, x1, y1), b0b = spec.b0(t, x2, y2);
      require_finite(b0a, "b0", at);
      require_finite(b0b, "b0", at);
      if (std::abs(b0a - b0b) > bound * denom)
        violation("b0-lipschitz", at, std::abs(b0a - b0b) / denom, spec.K);

      Vec f0a = spec.f0(t, x1, y1), f0b = spec.f0(t, x2, y2);
      require_finite(f0a, "f0", at);
      require_finite(f0b, "f0", at);
      if ((f0a - f0b).norm() > bound * denom)
        violation("f0-lipschitz", at, (f0a - f0b).norm() / denom, spec.K);

      // sigma: Lipschitz in all variables; reuse the pair for (x,y) too.
      Vec sa = spec.sigma(t, x1, y1, x1, y1);
      Vec sb = spec.sigma(t, x2, y2, x2, y2);
      require_finite(sa, "sigma", at);
      require_finite(sb, "sigma", at);
      const double sdenom = 2 * dx + 2 * dy;
      if (sdenom > 1e-14 && (sa - sb).norm() > bound * sdenom)
        violation("sigma-lipschitz", at, (sa - sb).norm() / sdenom, spec.K);

      Vec h2a = spec.h2(x1), h2b = spec.h2(x2);
      require_finite(h2a, "h2", at);
      require_finite(h2b, "h2", at);
      if (dx > 1e-14 && (h2a - h2b).norm() > bound * dx)
        violation("h2-lipschitz", at, (h2a - h2b).norm() / dx, spec.K);

      ++report.points_checked;
    }
  }

  if (spec.check_base_bounds) {
    Vec y0 = Vec::Zero(spec.n);
    for (int k = 0; k < t_probe; ++k) {
      const double t = spec.T * k / (t_probe - 1);
      std::string at = "t=" + std::to_string(t) + " (origin)";
      double b00 = spec.b0(t, 0.0, y0);
      Vec f00 = spec.f0(t, 0.0, y0);
      Vec s00 = spec.sigma(t, 0.0, y0, 0.0, y0);
      if (std::abs(b00) > bound) violation("b0-base-bound", at, std::abs(b00), spec.K);
      if (f00.norm() > bound) violation("f0-base-bound", at, f00.norm(), spec.K);
      if (s00.norm() > bound) violation("sigma-base-bound", at, s00.norm(), spec.K);
    }
    Vec h20 = spec.h2(0.0);
    if (h20.norm() > bound) violation("h2-base-bound", "xbar=0", h20.norm(), spec.K);
  }
  return report;
}

double resonance_gap(double alpha, double T) {
  if (alpha < 0) return 0.0;
  const double r = std::sqrt(alpha);
  return alpha * std::sin(r * T) - r * std::cos(r * T);
}

ProblemSpec preset_example1(double alpha, double lambda, double theta, double T,
                            bool require_resonance) {
  if (T <= 0) throw std::invalid_argument("example1: T must be positive");
  if (lambda < 0 || lambda > 1 || theta < 0 || theta > 1)
    throw std::invalid_argument("example1: lambda and theta must lie in [0,1]");
  if (require_resonance) {
    if (alpha < 0)
      throw std::invalid_argument("example1: resonance check needs alpha >= 0");
    if (std::abs(resonance_gap(alpha, T)) > 1e-9)
      throw std::invalid_argument(
          "example1: alpha sin(sqrt(alpha) T) = sqrt(alpha) cos(sqrt(alpha) T) "
          "does not hold");
  }
  ProblemSpec spec;
  spec.T = T;
  spec.n = 1;
  spec.d = 1;
  spec.K = std::max(1.0, std::abs(alpha));
  spec.name = "example1";
  spec.b1 = [](double) { return 0.0; };
  spec.b2 = [](double) { return Vec::Zero(1); };
  spec.f1 = [lambda](double) { return Vec::Constant(1, 1.0 - lambda); };
  spec.f2 = [](double) { return Mat::Zero(1, 1); };
  spec.b0 = [alpha](double, double, const Vec& ybar) { return alpha * ybar[0]; };
  spec.f0 = [lambda](double, double xbar, const Vec&) {
    return Vec::Constant(1, lambda * xbar);
  };
  spec.sigma = [](double, double, const Vec&, double, const Vec&) {
    return Vec::Zero(1);
  };
  spec.h1 = Vec::Constant(1, 1.0 - theta);
  spec.h2 = [theta](double xbar) { return Vec::Constant(1, theta * xbar); };
  spec.db0_dxbar = [](double, double, const Vec&) { return 0.0; };
  spec.db0_dybar = [alpha](double, double, const Vec&) {
    return Vec::Constant(1, alpha);
  };
  spec.df0_dxbar = [lambda](double, double, const Vec&) {
    return Vec::Constant(1, lambda);
  };
  spec.df0_dybar = [](double, double, const Vec&) { return Mat::Zero(1, 1); };
  spec.dh2 = [theta](double) { return Vec::Constant(1, theta); };
  return spec;
}

ProblemSpec preset_example2(double alpha, double beta, double lambda,
                            double theta, double T) {
  ProblemSpec spec = preset_example1(alpha, lambda, theta, T);
  spec.name = "example2";
  spec.K = std::max({1.0, std::abs(alpha), std::abs(beta)});
  spec.b0 = [alpha, beta](double, double xbar, const Vec& ybar) {
    return alpha * ybar[0] + beta * xbar;
  };
  spec.db0_dxbar = [beta](double, double, const Vec&) { return beta; };
  return spec;
}

LqCoefficients LqCoefficients::constants(double A, double Abar, double B,
                                         double Bbar, double Q, double Qbar,
                                         double R, double Rbar, double G,
                                         double Gbar, double sigma, double T) {
  LqCoefficients lq;
  lq.A = constant(A);
  lq.Abar = constant(Abar);
  lq.B = constant(B);
  lq.Bbar = constant(Bbar);
  lq.Q = constant(Q);
  lq.Qbar = constant(Qbar);
  lq.R = constant(R);
  lq.Rbar = constant(Rbar);
  lq.sigma = constant(sigma);
  lq.G = G;
  lq.Gbar = Gbar;
  lq.T = T;
  return lq;
}

LqCoefficients lq_defaults() {
  return LqCoefficients::constants(0.2, 0.1, 1.0, 0.5, 1.0, 0.25, 1.0, 0.5,
                                   1.0, 0.5, 0.3, 1.0);
}

ProblemSpec preset_example3(const LqCoefficients& lq) {
  if (lq.T <= 0) throw std::invalid_argument("example3: T must be positive");
  const int probes = 512;
  // Mean-field drift slopes of b0 in ybar and K calibration; R and R+Rbar
  // must stay away from zero.
  double K = 1.0;
  for (int k = 0; k <= probes; ++k) {
    const double t = lq.T * k / probes;
    const double R = lq.R(t), RR = lq.R(t) + lq.Rbar(t);
    if (R == 0.0)
      throw SolveError("example3: R(t) vanishes at t=" + std::to_string(t));
    if (RR == 0.0)
      throw SolveError("example3: R(t)+Rbar(t) vanishes at t=" + std::to_string(t));
    const double B = lq.B(t), BB = lq.B(t) + lq.Bbar(t);
    const double b2 = -B * B / R;
    const double b4 = B * B / R - BB * BB / RR;
    K = std::max({K, std::abs(lq.A(t)), std::abs(lq.Abar(t)), std::abs(lq.Q(t)),
                  std::abs(lq.Qbar(t)), std::abs(b2), std::abs(b4),
                  std::abs(lq.sigma(t))});
  }
  K = std::max({K, std::abs(lq.G), std::abs(lq.Gbar)});

  ProblemSpec spec;
  spec.T = lq.T;
  spec.n = 1;
  spec.d = 1;
  spec.K = K;
  spec.name = "example3";
  spec.b1 = [lq](double t) { return lq.A(t); };
  spec.b2 = [lq](double t) {
    const double B = lq.B(t);
    return Vec::Constant(1, -B * B / lq.R(t));
  };
  spec.f1 = [lq](double t) { return Vec::Constant(1, lq.Q(t)); };
  spec.f2 = [lq](double t) { return Mat::Constant(1, 1, lq.A(t)); };
  auto b4 = [lq](double t) {
    const double B = lq.B(t), BB = lq.B(t) + lq.Bbar(t);
    return B * B / lq.R(t) - BB * BB / (lq.R(t) + lq.Rbar(t));
  };
  spec.b0 = [lq, b4](double t, double xbar, const Vec& ybar) {
    return lq.Abar(t) * xbar + b4(t) * ybar[0];
  };
  spec.f0 = [lq](double t, double xbar, const Vec& ybar) {
    return Vec::Constant(1, lq.Abar(t) * ybar[0] + lq.Qbar(t) * xbar);
  };
  spec.sigma = [lq](double t, double, const Vec&, double, const Vec&) {
    return Vec::Constant(1, lq.sigma(t));
  };
  spec.h1 = Vec::Constant(1, lq.G);
  const double Gbar = lq.Gbar;
  spec.h2 = [Gbar](double xbar) { return Vec::Constant(1, Gbar * xbar); };
  spec.db0_dxbar = [lq](double t, double, const Vec&) { return lq.Abar(t); };
  spec.db0_dybar = [b4](double t, double, const Vec&) {
    return Vec::Constant(1, b4(t));
  };
  spec.df0_dxbar = [lq](double t, double, const Vec&) {
    return Vec::Constant(1, lq.Qbar(t));
  };
  spec.df0_dybar = [lq](double t, double, const Vec&) {
    return Mat::Constant(1, 1, lq.Abar(t));
  };
  spec.dh2 = [Gbar](double) { return Vec::Constant(1, Gbar); };
  return spec;
}

}  // namespace mfbsde
