#include "mfbsde/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

// Deliberately self-contained: this translation unit must not include or call
// the Riccati/field solvers it cross-checks.

namespace mfbsde {

namespace {

struct RawStages {
  double t0 = 0.0, h4 = 0.0;
  std::vector<double> b1;
  std::vector<Vec> b2, f1;
  std::vector<Mat> f2;
  double time_at(int q) const { return t0 + h4 * q; }
};

RawStages sample(const ProblemSpec& spec, double a, double b, int half_steps) {
  RawStages st;
  st.t0 = a;
  st.h4 = (b - a) / (2 * half_steps);
  const int qc = 2 * half_steps + 1;
  st.b1.resize(qc);
  st.b2.resize(qc);
  st.f1.resize(qc);
  st.f2.resize(qc);
  for (int q = 0; q < qc; ++q) {
    const double t = st.time_at(q);
    st.b1[q] = spec.b1(t);
    st.b2[q] = spec.b2(t);
    st.f1[q] = spec.f1(t);
    st.f2[q] = spec.f2(t);
  }
  return st;
}

inline double hermite_mid(double v0, double v1, double d0, double d1, double h) {
  return 0.5 * (v0 + v1) + h * 0.125 * (d0 - d1);
}
inline Vec hermite_mid(const Vec& v0, const Vec& v1, const Vec& d0,
                       const Vec& d1, double h) {
  return 0.5 * (v0 + v1) + (h * 0.125) * (d0 - d1);
}

struct RawCurves {
  std::vector<double> x, dx;
  std::vector<Vec> y, dy;
  void init(int points, double x0, const Vec& y0) {
    x.assign(points, x0);
    dx.assign(points, 0.0);
    y.assign(points, y0);
    dy.assign(points, Vec::Zero(y0.size()));
  }
};

using TerminalMap = std::function<Vec(double)>;

class RawWindow {
 public:
  RawWindow(const ProblemSpec& spec, const RawStages& st, int q0, int m2,
            const OracleConfig& cfg)
      : spec_(spec), st_(st), q0_(q0), m2_(m2), cfg_(cfg), h2_(2 * st.h4) {}

  double rhs_x(int q, double x, const Vec& y) const {
    return st_.b1[q] * x + st_.b2[q].dot(y) +
           spec_.b0(st_.time_at(q), x, y);
  }

  Vec rhs_y(int q, double x, const Vec& y) const {
    return -st_.f1[q] * x - st_.f2[q] * y - spec_.f0(st_.time_at(q), x, y);
  }

  void forward(double x0, const RawCurves& in, RawCurves& out) const {
    out.x[0] = x0;
    out.dx[0] = rhs_x(q0_, x0, in.y[0]);
    for (int i = 0; i < m2_; ++i) {
      const int q = q0_ + 2 * i;
      const Vec ymid = hermite_mid(in.y[i], in.y[i + 1], in.dy[i], in.dy[i + 1], h2_);
      const double k1 = out.dx[i];
      const double k2 = rhs_x(q + 1, out.x[i] + 0.5 * h2_ * k1, ymid);
      const double k3 = rhs_x(q + 1, out.x[i] + 0.5 * h2_ * k2, ymid);
      const double k4 = rhs_x(q + 2, out.x[i] + h2_ * k3, in.y[i + 1]);
      out.x[i + 1] = out.x[i] + h2_ / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
      out.dx[i + 1] = rhs_x(q + 2, out.x[i + 1], in.y[i + 1]);
    }
  }

  void backward(const TerminalMap& terminal, const RawCurves& src,
                RawCurves& out) const {
    out.y[m2_] = terminal(src.x[m2_]);
    out.dy[m2_] = rhs_y(q0_ + 2 * m2_, src.x[m2_], out.y[m2_]);
    for (int i = m2_; i > 0; --i) {
      const int q = q0_ + 2 * i;
      const double xmid =
          hermite_mid(src.x[i - 1], src.x[i], src.dx[i - 1], src.dx[i], h2_);
      const Vec k1 = out.dy[i];
      const Vec k2 = rhs_y(q - 1, xmid, out.y[i] - 0.5 * h2_ * k1);
      const Vec k3 = rhs_y(q - 1, xmid, out.y[i] - 0.5 * h2_ * k2);
      const Vec k4 = rhs_y(q - 2, src.x[i - 1], out.y[i] - h2_ * k3);
      out.y[i - 1] = out.y[i] - h2_ / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
      out.dy[i - 1] = rhs_y(q - 2, src.x[i - 1], out.y[i - 1]);
    }
  }

  // Damped Picard; returns converged / diverged plus iterations used.
  struct Result {
    bool converged = false;
    int iterations = 0;
  };
  Result picard(double x0, const TerminalMap& terminal, RawCurves& cur,
                const Vec& seed_y) const {
    Result res;
    const int points = m2_ + 1;
    cur.init(points, x0, seed_y);
    RawCurves next = cur;
    double prev = 0.0;
    int streak = 0;
    bool damped = false;
    const double guard = 1e12 * (1.0 + std::abs(x0));
    for (int it = 1; it <= cfg_.max_iter; ++it) {
      ++res.iterations;
      forward(x0, cur, next);
      backward(terminal, next, next);
      double update = 0.0;
      for (int i = 0; i < points; ++i) {
        update = std::max(update, std::abs(next.x[i] - cur.x[i]));
        update = std::max(update, (next.y[i] - cur.y[i]).lpNorm<Eigen::Infinity>());
        if (!std::isfinite(next.x[i]) || !next.y[i].allFinite()) update = 2 * guard;
      }
      const double d = damped ? cfg_.damping : 1.0;
      if (d < 1.0) {
        for (int i = 0; i < points; ++i) {
          cur.x[i] = (1 - d) * cur.x[i] + d * next.x[i];
          cur.dx[i] = (1 - d) * cur.dx[i] + d * next.dx[i];
          cur.y[i] = (1 - d) * cur.y[i] + d * next.y[i];
          cur.dy[i] = (1 - d) * cur.dy[i] + d * next.dy[i];
        }
      } else {
        cur = next;
      }
      if (update < cfg_.tol) {
        res.converged = true;
        return res;
      }
      const bool growing = it > 1 && update > prev && update > 10 * cfg_.tol;
      streak = growing ? streak + 1 : 0;
      prev = update;
      if (streak >= cfg_.growth_streak || update > guard) {
        if (!damped) {
          damped = true;
          streak = 0;
          cur.init(points, x0, seed_y);
          next = cur;
          prev = 0.0;
          continue;
        }
        return res;  // diverged
      }
    }
    return res;
  }

 private:
  const ProblemSpec& spec_;
  const RawStages& st_;
  int q0_, m2_;
  const OracleConfig& cfg_;
  double h2_;
};

struct RawSlice {
  std::vector<double> nodes;
  std::vector<Vec> values;
  Vec operator()(double x) const {
    const int n = static_cast<int>(nodes.size());
    if (n == 1) return values[0];
    if (x <= nodes.front())
      return values[0] +
             (x - nodes.front()) / (nodes[1] - nodes[0]) * (values[1] - values[0]);
    if (x >= nodes.back())
      return values[n - 1] + (x - nodes.back()) / (nodes[n - 1] - nodes[n - 2]) *
                                 (values[n - 1] - values[n - 2]);
    int lo = 0, hi = n - 1;
    while (hi - lo > 1) {
      int mid = (lo + hi) / 2;
      (nodes[mid] <= x ? lo : hi) = mid;
    }
    const double s = (x - nodes[lo]) / (nodes[lo + 1] - nodes[lo]);
    return (1 - s) * values[lo] + s * values[lo + 1];
  }
};

struct ChainOut {
  RawCurves curve;
  bool converged = false;
  int iterations = 0;
  int windows = 1;
};

// One full solve from a given backward seed curve value.
ChainOut solve_seeded(const ProblemSpec& spec, double nu0,
                      const std::vector<double>& tgrid, const Vec& seed_y,
                      const OracleConfig& cfg) {
  const double a = tgrid.front(), b = tgrid.back();
  const int m = static_cast<int>(tgrid.size()) - 1;
  TerminalMap terminal = [&spec](double x) -> Vec {
    return spec.h1 * x + spec.h2(x);
  };

  // Windows must tile the caller's grid exactly: round the desired count up
  // to the next divisor of m.
  auto divisor_geq = [m](int k) {
    for (int d = std::min(k, m); d <= m; ++d)
      if (m % d == 0) return d;
    return m;
  };

  int desired = std::max(1, cfg.force_windows);
  for (int halving = 0; halving <= cfg.max_halvings; ++halving) {
    const int W = divisor_geq(desired);
    const int mw = m / W;
    RawStages st = sample(spec, a, b, 2 * m);

    ChainOut out;
    out.windows = W;
    if (W == 1) {
      RawWindow win(spec, st, 0, 2 * m, cfg);
      RawCurves cur;
      auto res = win.picard(nu0, terminal, cur, seed_y);
      out.iterations = res.iterations;
      if (res.converged) {
        out.converged = true;
        out.curve = std::move(cur);
        return out;
      }
      if (cfg.force_windows > 0)
        throw SolveError("oracle-divergence: forced window count did not contract");
      desired = 2;
      continue;
    }

    // Pasting: terminal slices at the interior boundaries, back to front.
    double range = (1.0 + std::abs(nu0)) *
                   std::exp(std::min(2.0 * spec.K * (b - a), 20.0));
    bool ok = false;
    for (int attempt = 0; attempt < 3 && !ok; ++attempt, range *= 2) {
      std::vector<RawSlice> slices(W + 1);
      std::vector<TerminalMap> term(W + 1);
      term[W] = terminal;
      bool failed = false;
      const int nn = std::max(3, cfg.slice_nodes);
      for (int w = W - 1; w >= 1 && !failed; --w) {
        RawSlice& sm = slices[w];
        sm.nodes.resize(nn);
        sm.values.resize(nn);
        RawWindow win(spec, st, w * 4 * mw, 2 * mw, cfg);
        for (int j = 0; j < nn; ++j) {
          const double x = nu0 - range + 2.0 * range * j / (nn - 1);
          sm.nodes[j] = x;
          RawCurves cur;
          auto res = win.picard(x, term[w + 1], cur, seed_y);
          out.iterations += res.iterations;
          if (!res.converged) {
            failed = true;
            break;
          }
          sm.values[j] = cur.y[0];
        }
        if (!failed) {
          const RawSlice* smp = &slices[w];
          term[w] = [smp](double x) { return (*smp)(x); };
        }
      }
      if (failed) break;

      out.curve.init(2 * m + 1, nu0, seed_y);
      double entry = nu0;
      out.converged = true;
      bool in_range = true;
      for (int w = 0; w < W; ++w) {
        RawWindow win(spec, st, w * 4 * mw, 2 * mw, cfg);
        RawCurves cur;
        auto res = win.picard(entry, term[w + 1], cur, seed_y);
        out.iterations += res.iterations;
        if (!res.converged) {
          out.converged = false;
          break;
        }
        for (int i = 0; i <= 2 * mw; ++i) {
          const int gi = w * 2 * mw + i;
          out.curve.x[gi] = cur.x[i];
          out.curve.dx[gi] = cur.dx[i];
          out.curve.y[gi] = cur.y[i];
          out.curve.dy[gi] = cur.dy[i];
        }
        entry = cur.x[2 * mw];
        if (w + 1 <= W - 1 &&
            (entry < nu0 - 0.95 * range || entry > nu0 + 0.95 * range))
          in_range = false;
      }
      if (out.converged && in_range)
        ok = true;
      else if (out.converged)
        out.converged = false;  // widen the range and retry
      else
        break;
    }
    if (ok) return out;
    if (cfg.force_windows > 0)
      throw SolveError("oracle-divergence: forced window count did not contract");
    if (W >= m) break;
    desired = W * 2;
  }
  throw SolveError("oracle-divergence: no contraction after " +
                   std::to_string(cfg.max_halvings) + " interval halvings");
}

}  // namespace

ExpectationPath solve_expectation_system(const ProblemSpec& spec, double nu0,
                                         const std::vector<double>& tgrid,
                                         const OracleConfig& cfg) {
  if (tgrid.size() < 3)
    throw std::invalid_argument("solve_expectation_system: need >= 3 grid nodes");

  // Zero-seed run (canonical) and an offset h-curve seed; distinct fixed
  // points surface non-uniqueness.
  const Vec seed0 = Vec::Zero(spec.n);
  const Vec seed1 = spec.h1 * (nu0 + 1.0) + spec.h2(nu0 + 1.0);

  ChainOut run0 = solve_seeded(spec, nu0, tgrid, seed0, cfg);
  ChainOut run1 = solve_seeded(spec, nu0, tgrid, seed1, cfg);

  ExpectationPath path;
  path.tgrid = tgrid;
  path.iterations = run0.iterations + run1.iterations;
  path.converged = run0.converged && run1.converged;
  path.windows = run0.windows;
  const int m = static_cast<int>(tgrid.size()) - 1;
  path.xbar.resize(m + 1);
  path.ybar.resize(m + 1);
  for (int i = 0; i <= m; ++i) {
    path.xbar[i] = run0.curve.x[2 * i];
    path.ybar[i] = run0.curve.y[2 * i];
  }
  double gap = 0.0;
  for (int i = 0; i <= 2 * m; ++i) {
    gap = std::max(gap, std::abs(run0.curve.x[i] - run1.curve.x[i]));
    gap = std::max(gap, (run0.curve.y[i] - run1.curve.y[i]).lpNorm<Eigen::Infinity>());
  }
  path.fixed_point_gap = gap;
  path.multiple_fixed_points = gap > cfg.multiplicity_scale * cfg.tol;
  return path;
}

}  // namespace mfbsde
