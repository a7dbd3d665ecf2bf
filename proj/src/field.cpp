#include "mfbsde/field.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <thread>

#include <Eigen/Dense>

namespace mfbsde {

namespace {

// Coefficient samples on the quarter grid (spacing h2/2), so RK4 sweeps of
// step h2 over the half grid find every stage time precomputed.
struct StageCoeffs {
  double t0 = 0.0, h4 = 0.0;
  std::vector<double> b1;
  std::vector<Vec> b2;
  std::vector<Mat> f2;
  std::vector<Vec> P;
  std::vector<double> b2P;  // b2·P
  double time_at(int q) const { return t0 + h4 * q; }
};

StageCoeffs sample_stages(const ProblemSpec& spec, const RiccatiSolution& Psol,
                          double a, double b, int half_steps) {
  StageCoeffs st;
  const int q_count = 2 * half_steps + 1;
  st.t0 = a;
  st.h4 = (b - a) / (2 * half_steps);
  st.b1.resize(q_count);
  st.b2.resize(q_count);
  st.f2.resize(q_count);
  st.P.resize(q_count);
  st.b2P.resize(q_count);
  for (int q = 0; q < q_count; ++q) {
    const double t = std::min(b, st.time_at(q));
    st.b1[q] = spec.b1(t);
    st.b2[q] = spec.b2(t);
    st.f2[q] = spec.f2(t);
    st.P[q] = eval_P(Psol, t);
    st.b2P[q] = st.b2[q].dot(st.P[q]);
  }
  return st;
}

inline double hermite_mid(double v0, double v1, double d0, double d1, double h) {
  return 0.5 * (v0 + v1) + h * 0.125 * (d0 - d1);
}

// Working curves over one window's half grid.
struct Curves {
  std::vector<double> nu, dnu;
  std::vector<Vec> phi, dphi;
  void init(int points, double nu0, const Vec& phi0) {
    nu.assign(points, nu0);
    dnu.assign(points, 0.0);
    phi.assign(points, phi0);
    dphi.assign(points, Vec::Zero(phi0.size()));
  }
};

using TerminalMap = std::function<Vec(double)>;

struct WindowResult {
  bool converged = false;
  int iterations = 0;
  double contraction = 0.0;
  bool used_damping = false;
  double damping_value = 1.0;
};

class WindowSolver {
 public:
  WindowSolver(const ProblemSpec& spec, const StageCoeffs& st, int q_offset,
               int half_steps, const SolverConfig& cfg)
      : spec_(spec), st_(st), q0_(q_offset), m2_(half_steps), cfg_(cfg),
        h2_(2 * st.h4), n_(spec.n) {
    ybar_.resize(n_);
    phi_mid_.resize(n_);
    k1_.resize(n_); k2_.resize(n_); k3_.resize(n_); k4_.resize(n_);
    acc_.resize(n_);
  }

  // nu drift: (b1 + b2·P) nu + b2·phi + b0(t, nu, P nu + phi)
  double rhs_nu(int q, double nu, const Vec& phi) {
    ybar_ = phi;
    ybar_ += nu * st_.P[q];
    return (st_.b1[q] + st_.b2P[q]) * nu + st_.b2[q].dot(phi) +
           spec_.b0(st_.time_at(q), nu, ybar_);
  }

  // phi drift: -f2 phi - (b2·phi) P - f0 - P b0, written into `out`
  void rhs_phi(int q, double nu, const Vec& phi, Vec& out) {
    const double t = st_.time_at(q);
    ybar_ = phi;
    ybar_ += nu * st_.P[q];
    const double b0v = spec_.b0(t, nu, ybar_);
    out.noalias() = -(st_.f2[q] * phi);
    out -= (st_.b2[q].dot(phi) + b0v) * st_.P[q];
    out -= spec_.f0(t, nu, ybar_);
  }

  void forward_sweep(double nu0, const Curves& in, Curves& out) {
    out.nu[0] = nu0;
    out.dnu[0] = rhs_nu(q0_, nu0, in.phi[0]);
    for (int i = 0; i < m2_; ++i) {
      const int q = q0_ + 2 * i;
      phi_mid_ = 0.5 * (in.phi[i] + in.phi[i + 1]);
      phi_mid_ += (h2_ * 0.125) * (in.dphi[i] - in.dphi[i + 1]);
      const double k1 = out.dnu[i];
      const double k2 = rhs_nu(q + 1, out.nu[i] + 0.5 * h2_ * k1, phi_mid_);
      const double k3 = rhs_nu(q + 1, out.nu[i] + 0.5 * h2_ * k2, phi_mid_);
      const double k4 = rhs_nu(q + 2, out.nu[i] + h2_ * k3, in.phi[i + 1]);
      out.nu[i + 1] = out.nu[i] + h2_ / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
      out.dnu[i + 1] = rhs_nu(q + 2, out.nu[i + 1], in.phi[i + 1]);
    }
  }

  void backward_sweep(const TerminalMap& terminal, const Curves& nu_src,
                      Curves& out) {
    out.phi[m2_] = terminal(nu_src.nu[m2_]);
    rhs_phi(q0_ + 2 * m2_, nu_src.nu[m2_], out.phi[m2_], out.dphi[m2_]);
    for (int i = m2_; i > 0; --i) {
      const int q = q0_ + 2 * i;
      const double nu_mid = hermite_mid(nu_src.nu[i - 1], nu_src.nu[i],
                                        nu_src.dnu[i - 1], nu_src.dnu[i], h2_);
      k1_ = out.dphi[i];
      acc_ = out.phi[i];
      acc_ -= 0.5 * h2_ * k1_;
      rhs_phi(q - 1, nu_mid, acc_, k2_);
      acc_ = out.phi[i];
      acc_ -= 0.5 * h2_ * k2_;
      rhs_phi(q - 1, nu_mid, acc_, k3_);
      acc_ = out.phi[i];
      acc_ -= h2_ * k3_;
      rhs_phi(q - 2, nu_src.nu[i - 1], acc_, k4_);
      out.phi[i - 1] = out.phi[i];
      out.phi[i - 1] -= (h2_ / 6.0) * (k1_ + 2 * k2_ + 2 * k3_ + k4_);
      rhs_phi(q - 2, nu_src.nu[i - 1], out.phi[i - 1], out.dphi[i - 1]);
    }
  }

  // Damped Gauss-Seidel Picard with Lyusternik extrapolation of the
  // geometric tail. Whole-interval alternation can have spectral radius
  // above one (hence the paper's tiny delta); a relaxation factor fitted to
  // the dominant ratio restores contraction without shrinking the window.
  WindowResult picard(double nu0, const TerminalMap& terminal, Curves& cur,
                      bool warm, bool start_damped = false,
                      double damping_hint = 0.0) {
    WindowResult res;
    const int points = m2_ + 1;
    if (!warm) cur.init(points, nu0, terminal(nu0));
    const Curves initial = cur;  // reset target if damping activates late
    Curves next = cur;
    Curves prev = cur;
    double prev_update = 0.0;
    double prev_ratio = -9.0;
    int streak = 0;
    bool damped = start_damped;
    double d = damped ? (damping_hint > 0 ? damping_hint : cfg_.damping) : 1.0;
    bool have_delta = false;
    std::vector<double> dnu_prev(points, 0.0);
    std::vector<Vec> dphi_prev(points, Vec::Zero(n_));
    const double guard = 1e12 * (1.0 + std::abs(nu0));

    for (int it = 1; it <= cfg_.max_iter; ++it) {
      ++res.iterations;
      forward_sweep(nu0, cur, next);
      backward_sweep(terminal, next, next);

      double update = 0.0;
      double dot = 0.0, norm_prev = 0.0;
      for (int i = 0; i < points; ++i) {
        const double dn = next.nu[i] - cur.nu[i];
        update = std::max(update, std::abs(dn));
        if (!std::isfinite(dn)) update = 2 * guard;
        if (have_delta) {
          dot += dn * dnu_prev[i];
          norm_prev += dnu_prev[i] * dnu_prev[i];
        }
        dnu_prev[i] = dn;
      }
      for (int i = 0; i < points; ++i) {
        acc_ = next.phi[i] - cur.phi[i];
        update = std::max(update, acc_.lpNorm<Eigen::Infinity>());
        if (!acc_.allFinite()) update = 2 * guard;
        if (have_delta) {
          dot += acc_.dot(dphi_prev[i]);
          norm_prev += dphi_prev[i].squaredNorm();
        }
        dphi_prev[i] = acc_;
      }
      const double ratio = (have_delta && norm_prev > 0) ? dot / norm_prev : -9.0;

      if (it > 1 && prev_update > 0 && update > 0)
        res.contraction = update / prev_update;
      prev = cur;
      if (d < 1.0) {
        for (int i = 0; i < points; ++i) {
          cur.nu[i] = (1 - d) * cur.nu[i] + d * next.nu[i];
          cur.dnu[i] = (1 - d) * cur.dnu[i] + d * next.dnu[i];
          cur.phi[i] = (1 - d) * cur.phi[i] + d * next.phi[i];
          cur.dphi[i] = (1 - d) * cur.dphi[i] + d * next.dphi[i];
        }
      } else {
        cur = next;
      }
      if (update < cfg_.tol) {
        res.converged = true;
        res.used_damping = damped;
        res.damping_value = d;
        return res;
      }

      // Lyusternik step: once the iteration settles into a geometric
      // sequence of raw sweep deltas with ratio r (already the damped-step
      // ratio when d < 1), the limit is cur + d*r/(1-r) * delta.
      const double ratio_old = prev_ratio;
      const bool stable = ratio > -9.0 && ratio_old > -9.0 &&
                          std::abs(ratio - ratio_old) <
                              0.05 + 0.15 * std::abs(ratio);
      if (stable && std::abs(ratio) > 0.05 && std::abs(ratio) < 0.97) {
        const double boost = d * ratio / (1.0 - ratio);
        for (int i = 0; i < points; ++i) {
          cur.nu[i] += boost * dnu_prev[i];
          cur.dnu[i] += boost * (next.dnu[i] - prev.dnu[i]);
          cur.phi[i] += boost * dphi_prev[i];
          cur.dphi[i] += boost * (next.dphi[i] - prev.dphi[i]);
        }
        have_delta = false;
        prev_ratio = -9.0;
        prev_update = 0.0;
        streak = 0;
        continue;
      }
      prev_ratio = ratio;
      have_delta = true;

      const bool growing = it > 1 && update > prev_update && update > 10 * cfg_.tol;
      streak = growing ? streak + 1 : 0;
      prev_update = update;
      // Divergence: a confirmed expanding delta ratio or a long growth run.
      const bool expanding = streak >= 3 && stable && std::abs(ratio) > 1.02;
      if (streak >= cfg_.growth_streak || expanding || update > guard) {
        if (!damped) {
          damped = true;
          // relaxation fitted to the dominant ratio when it is known
          d = (ratio < -0.05 && ratio > -20.0)
                  ? std::clamp(1.0 / (1.0 - ratio), 0.15, 0.85)
                  : cfg_.damping;
          streak = 0;
          cur = initial;
          next = cur;
          prev_update = 0.0;
          have_delta = false;
          prev_ratio = -9.0;
          continue;
        }
        res.used_damping = true;
        res.damping_value = d;
        return res;  // diverged
      }
    }
    res.used_damping = damped;
    res.damping_value = d;
    return res;  // ran out of iterations without contraction
  }

 private:
  const ProblemSpec& spec_;
  const StageCoeffs& st_;
  int q0_, m2_;
  const SolverConfig& cfg_;
  double h2_;
  int n_;
  Vec ybar_, phi_mid_, k1_, k2_, k3_, k4_, acc_;
};

// Piecewise-linear nu -> phi map used as terminal data at pasted boundaries.
struct SliceMap {
  std::vector<double> nodes;
  std::vector<Vec> values;

  Vec operator()(double nu) const {
    const int n = static_cast<int>(nodes.size());
    if (n == 1) return values[0];
    if (nu <= nodes.front())
      return values[0] + (nu - nodes.front()) / (nodes[1] - nodes[0]) *
                             (values[1] - values[0]);
    if (nu >= nodes.back())
      return values[n - 1] + (nu - nodes.back()) / (nodes[n - 1] - nodes[n - 2]) *
                                 (values[n - 1] - values[n - 2]);
    int lo = 0, hi = n - 1;
    while (hi - lo > 1) {
      int mid = (lo + hi) / 2;
      (nodes[mid] <= nu ? lo : hi) = mid;
    }
    const double s = (nu - nodes[lo]) / (nodes[lo + 1] - nodes[lo]);
    return (1 - s) * values[lo] + s * values[lo + 1];
  }
};

struct ChainResult {
  Curves curve;        // concatenated over the whole interval
  int half_steps = 0;  // total half-steps
  double h2 = 0.0;
  bool converged = false;
  int iterations = 0;
  double contraction = 0.0;
  int windows = 1;
};

int choose_steps(double len, const SolverConfig& cfg) {
  return std::max(2, static_cast<int>(std::lround(cfg.steps_per_unit * len)));
}

// Reusable coefficient samples and iteration hints for repeated solves over
// the same interval (one cache per field row).
struct StageCache {
  int window_count = 0;
  int half_steps = 0;
  StageCoeffs stages;
  bool prefer_damped = false;
  double damping_hint = 0.0;
};

// Whole-interval Picard, halving into equal windows with pasted terminal
// slices until every window contracts.
ChainResult solve_chain(const ProblemSpec& spec, const RiccatiSolution& Psol,
                        double t0, double nu0, const SolverConfig& cfg,
                        Curves* warm_curve, StageCache* cache) {
  const double T = spec.T;
  const double len = T - t0;
  int W = 1;
  if (cfg.window > 0 && cfg.window < len)
    W = static_cast<int>(std::ceil(len / cfg.window - 1e-12));

  for (int halving = 0;; ++halving, W *= 2) {
    if (halving > cfg.max_halvings)
      throw SolveError("fbode-divergence: no contraction after " +
                       std::to_string(cfg.max_halvings) + " window halvings");
    const double wlen = len / W;
    const int mw = choose_steps(wlen, cfg);  // node steps per window
    const int m2w = 2 * mw;                  // half-steps per window

    const StageCoeffs* st = nullptr;
    StageCoeffs local;
    if (cache && cache->window_count == W && cache->half_steps == W * m2w) {
      st = &cache->stages;
    } else {
      local = sample_stages(spec, Psol, t0, T, W * m2w);
      if (cache) {
        cache->stages = std::move(local);
        cache->window_count = W;
        cache->half_steps = W * m2w;
        st = &cache->stages;
      } else {
        st = &local;
      }
    }

    ChainResult out;
    out.windows = W;
    out.h2 = wlen / m2w;
    out.half_steps = W * m2w;

    if (W == 1) {
      WindowSolver solver(spec, *st, 0, m2w, cfg);
      Curves cur;
      bool warm = false;
      if (warm_curve && static_cast<int>(warm_curve->nu.size()) == m2w + 1) {
        cur = *warm_curve;
        warm = true;
      }
      const bool hint_damped = cache && cache->prefer_damped;
      const double hint_value = cache ? cache->damping_hint : 0.0;
      TerminalMap terminal = [&spec](double nu) { return spec.h2(nu); };
      WindowResult res =
          solver.picard(nu0, terminal, cur, warm, hint_damped, hint_value);
      out.iterations = res.iterations;
      out.contraction = res.contraction;
      if (res.converged) {
        if (cache) {
          cache->prefer_damped = res.used_damping;
          cache->damping_hint = res.used_damping ? res.damping_value : 0.0;
        }
        out.converged = true;
        out.curve = std::move(cur);
        return out;
      }
      if (warm) {  // retry cold once before halving
        Curves cold;
        WindowResult res2 =
            solver.picard(nu0, terminal, cold, false, hint_damped, hint_value);
        out.iterations += res2.iterations;
        out.contraction = res2.contraction;
        if (res2.converged) {
          if (cache) {
            cache->prefer_damped = res2.used_damping;
            cache->damping_hint = res2.used_damping ? res2.damping_value : 0.0;
          }
          out.converged = true;
          out.curve = std::move(cold);
          return out;
        }
      }
      continue;  // halve
    }

    // Pasting: build terminal slices back to front, then march forward.
    double range = (1.0 + std::abs(nu0)) *
                   std::exp(std::min(2.0 * spec.K * len, 20.0));
    bool ok = false;
    for (int attempt = 0; attempt < 3 && !ok; ++attempt, range *= 2) {
      std::vector<SliceMap> slices(W + 1);
      std::vector<TerminalMap> terminal(W + 1);
      terminal[W] = [&spec](double nu) { return spec.h2(nu); };
      bool failed = false;
      const int nn = std::max(3, cfg.slice_nodes);
      for (int w = W - 1; w >= 1 && !failed; --w) {
        SliceMap& sm = slices[w];
        sm.nodes.resize(nn);
        sm.values.resize(nn);
        WindowSolver solver(spec, *st, w * 2 * m2w, m2w, cfg);
        for (int j = 0; j < nn; ++j) {
          const double nu = nu0 - range + 2.0 * range * j / (nn - 1);
          sm.nodes[j] = nu;
          Curves cur;
          WindowResult res = solver.picard(nu, terminal[w + 1], cur, false);
          out.iterations += res.iterations;
          if (!res.converged) {
            failed = true;
            break;
          }
          sm.values[j] = cur.phi[0];
        }
        if (!failed) {
          const SliceMap* smp = &slices[w];
          terminal[w] = [smp](double nu) { return (*smp)(nu); };
        }
      }
      if (failed) break;  // halve further

      out.curve.init(out.half_steps + 1, nu0, Vec::Zero(spec.n));
      double entry = nu0;
      bool in_range = true;
      out.converged = true;
      for (int w = 0; w < W; ++w) {
        WindowSolver solver(spec, *st, w * 2 * m2w, m2w, cfg);
        Curves cur;
        WindowResult res = solver.picard(
            entry, w + 1 <= W - 1 ? terminal[w + 1] : terminal[W], cur, false);
        out.iterations += res.iterations;
        out.contraction = res.contraction;
        if (!res.converged) {
          out.converged = false;
          break;
        }
        for (int i = 0; i <= m2w; ++i) {
          const int gi = w * m2w + i;
          out.curve.nu[gi] = cur.nu[i];
          out.curve.dnu[gi] = cur.dnu[i];
          out.curve.phi[gi] = cur.phi[i];
          out.curve.dphi[gi] = cur.dphi[i];
        }
        entry = cur.nu[m2w];
        if (w + 1 <= W - 1 &&
            (entry < nu0 - range * 0.95 || entry > nu0 + range * 0.95))
          in_range = false;
      }
      if (out.converged && in_range)
        ok = true;
      else if (out.converged)
        out.converged = false;  // widen the slice range and retry
      else
        break;  // a window diverged; halve further
    }
    if (ok) return out;
  }
}

FbodeTrajectory chain_to_trajectory(ChainResult&& chain, double t0, double T) {
  FbodeTrajectory traj;
  traj.converged = chain.converged;
  traj.iterations = chain.iterations;
  traj.contraction_factor = chain.contraction;
  traj.windows = chain.windows;
  traj.curve.a = t0;
  traj.curve.b = T;
  traj.curve.h2 = chain.h2;
  traj.curve.nu = std::move(chain.curve.nu);
  traj.curve.dnu = std::move(chain.curve.dnu);
  traj.curve.phi = std::move(chain.curve.phi);
  traj.curve.dphi = std::move(chain.curve.dphi);
  const int m = chain.half_steps / 2;
  traj.tgrid.resize(m + 1);
  traj.nu.resize(m + 1);
  traj.phi.resize(m + 1);
  for (int i = 0; i <= m; ++i) {
    traj.tgrid[i] = t0 + (T - t0) * i / m;
    traj.nu[i] = traj.curve.nu[2 * i];
    traj.phi[i] = traj.curve.phi[2 * i];
  }
  return traj;
}

// Variational fundamental-matrix integration; returns M(T) and optionally the
// full path of M at half-grid nodes.
class VariationalIntegrator {
 public:
  VariationalIntegrator(const ProblemSpec& spec, const RiccatiSolution& Psol,
                        const CurveGrid& curve, const StageCoeffs* st)
      : spec_(spec), Psol_(Psol), curve_(curve), st_(st), n_(spec.n) {
    A_.resize(n_ + 1, n_ + 1);
    K1_.resize(n_ + 1, n_ + 1);
    K2_.resize(n_ + 1, n_ + 1);
    K3_.resize(n_ + 1, n_ + 1);
    K4_.resize(n_ + 1, n_ + 1);
    tmp_.resize(n_ + 1, n_ + 1);
    ybar_.resize(n_);
    db0_dphi_.resize(n_);
    df0_dnu_.resize(n_);
    df0_dphi_.resize(n_, n_);
    dxbar_f_.resize(n_);
    phi_buf_.resize(n_);
    P_buf_.resize(n_);
    b2_buf_.resize(n_);
    f2_buf_.resize(n_, n_);
  }

  Mat integrate(std::vector<Mat>* path) {
    const int m2 = curve_.nodes() - 1;
    const double h2 = curve_.h2;
    Mat M = Mat::Identity(n_ + 1, n_ + 1);
    if (path) {
      path->resize(m2 + 1);
      (*path)[0] = M;
    }
    for (int i = 0; i < m2; ++i) {
      system_matrix(2 * i, A_);
      K1_.noalias() = A_ * M;
      system_matrix(2 * i + 1, A_);
      tmp_ = M + 0.5 * h2 * K1_;
      K2_.noalias() = A_ * tmp_;
      tmp_ = M + 0.5 * h2 * K2_;
      K3_.noalias() = A_ * tmp_;
      system_matrix(2 * i + 2, A_);
      tmp_ = M + h2 * K3_;
      K4_.noalias() = A_ * tmp_;
      M += h2 / 6.0 * (K1_ + 2 * K2_ + 2 * K3_ + K4_);
      if (path) (*path)[i + 1] = M;
    }
    return M;
  }

 private:
  // Trajectory state at quarter index q: node values directly, midpoints via
  // the Hermite formula.
  void state_at(int q, double& nu, Vec& phi) const {
    if (q % 2 == 0) {
      nu = curve_.nu[q / 2];
      phi = curve_.phi[q / 2];
    } else {
      const int i = q / 2;
      const double h2 = curve_.h2;
      nu = hermite_mid(curve_.nu[i], curve_.nu[i + 1], curve_.dnu[i],
                       curve_.dnu[i + 1], h2);
      phi = 0.5 * (curve_.phi[i] + curve_.phi[i + 1]);
      phi += (h2 * 0.125) * (curve_.dphi[i] - curve_.dphi[i + 1]);
    }
  }

  void system_matrix(int q, Mat& A) {
    const double s =
        std::min(curve_.b, curve_.a + 0.5 * curve_.h2 * q);
    double nu;
    state_at(q, nu, phi_buf_);
    const Vec& phi = phi_buf_;
    double b1;
    if (st_ && q < static_cast<int>(st_->P.size())) {
      P_buf_ = st_->P[q];
      b2_buf_ = st_->b2[q];
      f2_buf_ = st_->f2[q];
      b1 = st_->b1[q];
    } else {
      P_buf_ = eval_P(Psol_, s);
      b2_buf_ = spec_.b2(s);
      f2_buf_ = spec_.f2(s);
      b1 = spec_.b1(s);
    }
    const Vec& P = P_buf_;
    const Vec& b2 = b2_buf_;
    const Mat& f2 = f2_buf_;
    ybar_ = phi;
    ybar_ += nu * P;

    double db0_dxbar;
    if (spec_.db0_dxbar && spec_.db0_dybar) {
      db0_dxbar = spec_.db0_dxbar(s, nu, ybar_);
      db0_dphi_ = spec_.db0_dybar(s, nu, ybar_);
    } else {
      const double hx = 1e-6 * (1.0 + std::abs(nu));
      db0_dxbar =
          (spec_.b0(s, nu + hx, ybar_) - spec_.b0(s, nu - hx, ybar_)) / (2 * hx);
      for (int j = 0; j < n_; ++j) {
        const double hy = 1e-6 * (1.0 + std::abs(ybar_[j]));
        Vec yp = ybar_, ym = ybar_;
        yp[j] += hy;
        ym[j] -= hy;
        db0_dphi_[j] = (spec_.b0(s, nu, yp) - spec_.b0(s, nu, ym)) / (2 * hy);
      }
    }
    if (spec_.df0_dxbar && spec_.df0_dybar) {
      dxbar_f_ = spec_.df0_dxbar(s, nu, ybar_);
      df0_dphi_ = spec_.df0_dybar(s, nu, ybar_);
    } else {
      const double hx = 1e-6 * (1.0 + std::abs(nu));
      dxbar_f_ = (spec_.f0(s, nu + hx, ybar_) - spec_.f0(s, nu - hx, ybar_)) / (2 * hx);
      for (int j = 0; j < n_; ++j) {
        const double hy = 1e-6 * (1.0 + std::abs(ybar_[j]));
        Vec yp = ybar_, ym = ybar_;
        yp[j] += hy;
        ym[j] -= hy;
        df0_dphi_.col(j) = (spec_.f0(s, nu, yp) - spec_.f0(s, nu, ym)) / (2 * hy);
      }
    }
    const double db0_dnu = db0_dxbar + db0_dphi_.dot(P);
    df0_dnu_ = dxbar_f_ + df0_dphi_ * P;

    A(0, 0) = b1 + b2.dot(P) + db0_dnu;
    A.block(0, 1, 1, n_) = (b2 + db0_dphi_).transpose();
    A.block(1, 0, n_, 1) = -(df0_dnu_ + db0_dnu * P);
    A.block(1, 1, n_, n_) =
        -f2 - P * b2.transpose() - df0_dphi_ - P * db0_dphi_.transpose();
  }

  const ProblemSpec& spec_;
  const RiccatiSolution& Psol_;
  const CurveGrid& curve_;
  const StageCoeffs* st_;
  int n_;
  Mat A_, K1_, K2_, K3_, K4_, tmp_;
  Vec ybar_, db0_dphi_, df0_dnu_, dxbar_f_;
  Mat df0_dphi_;
  Vec phi_buf_, P_buf_, b2_buf_;
  Mat f2_buf_;
};

Vec terminal_slope(const ProblemSpec& spec, double nuT) {
  if (spec.dh2) return spec.dh2(nuT);
  const double h = 1e-6 * (1.0 + std::abs(nuT));
  return (spec.h2(nuT + h) - spec.h2(nuT - h)) / (2 * h);
}

// Matching condition of the variational two-point problem.
Vec solve_matching(const ProblemSpec& spec, const Mat& M, double nuT) {
  const int n = spec.n;
  const Vec h2p = terminal_slope(spec, nuT);
  const double Mnn = M(0, 0);
  const Mat Mnp = M.block(0, 1, 1, n);
  const Vec Mpn = M.block(1, 0, n, 1);
  const Mat Mpp = M.block(1, 1, n, n);
  Mat lhs = Mpp - h2p * Mnp;
  Vec rhs = h2p * Mnn - Mpn;
  Eigen::FullPivLU<Mat> lu(lhs);
  if (!lu.isInvertible())
    throw SolveError(
        "variational-singular: matching condition has no unique solution");
  return lu.solve(rhs);
}

}  // namespace

double CurveGrid::eval_nu(double s) const {
  const int m2 = nodes() - 1;
  double u = (s - a) / h2;
  int i = std::clamp(static_cast<int>(u), 0, m2 - 1);
  const double loc = u - i;
  const double d0 = dnu[i] * h2, d1 = dnu[i + 1] * h2;
  const double s2 = loc * loc, s3 = s2 * loc;
  return (2 * s3 - 3 * s2 + 1) * nu[i] + (s3 - 2 * s2 + loc) * d0 +
         (-2 * s3 + 3 * s2) * nu[i + 1] + (s3 - s2) * d1;
}

Vec CurveGrid::eval_phi(double s) const {
  const int m2 = nodes() - 1;
  double u = (s - a) / h2;
  int i = std::clamp(static_cast<int>(u), 0, m2 - 1);
  const double loc = u - i;
  const Vec d0 = dphi[i] * h2, d1 = dphi[i + 1] * h2;
  const double s2 = loc * loc, s3 = s2 * loc;
  return (2 * s3 - 3 * s2 + 1) * phi[i] + (s3 - 2 * s2 + loc) * d0 +
         (-2 * s3 + 3 * s2) * phi[i + 1] + (s3 - s2) * d1;
}

FbodeTrajectory solve_fbode(const ProblemSpec& spec, const RiccatiSolution& P,
                            double t0, double nu0, const SolverConfig& cfg) {
  if (t0 < 0 || t0 >= spec.T)
    throw std::invalid_argument("solve_fbode: t0 must lie in [0, T)");
  ChainResult chain = solve_chain(spec, P, t0, nu0, cfg, nullptr, nullptr);
  FbodeTrajectory traj = chain_to_trajectory(std::move(chain), t0, spec.T);
  if (!traj.converged)
    throw SolveError("fbode-divergence: Picard iteration did not contract "
                     "(windows=" + std::to_string(traj.windows) + ")");
  return traj;
}

VariationalSolution solve_variational(const ProblemSpec& spec,
                                      const RiccatiSolution& Psol,
                                      const FbodeTrajectory& traj,
                                      const SolverConfig& cfg) {
  (void)cfg;
  const CurveGrid& curve = traj.curve;
  const int m2 = curve.nodes() - 1;
  VariationalIntegrator integ(spec, Psol, curve, nullptr);
  std::vector<Mat> path;
  const Mat M = integ.integrate(&path);
  const Vec w = solve_matching(spec, M, curve.nu[m2]);

  VariationalSolution vs;
  const int n = spec.n;
  const int m = m2 / 2;
  vs.tgrid.resize(m + 1);
  vs.grad_nu.resize(m + 1);
  vs.grad_phi.resize(m + 1);
  Vec init(n + 1);
  init[0] = 1.0;
  init.tail(n) = w;
  for (int i = 0; i <= m; ++i) {
    vs.tgrid[i] = curve.time_at(2 * i);
    const Vec v = path[2 * i] * init;
    vs.grad_nu[i] = v[0];
    vs.grad_phi[i] = v.tail(n);
  }
  return vs;
}

namespace {

Vec interp_table(const std::vector<double>& tgrid,
                 const std::vector<double>& nugrid,
                 const std::vector<Vec>& table, Interp t_interp, double t,
                 double nu, bool* extrapolated, const char* what) {
  const double T = tgrid.back();
  if (t < tgrid.front() - 1e-12 || t > T + 1e-12)
    throw std::out_of_range(std::string(what) + ": t outside grid");
  t = std::clamp(t, tgrid.front(), T);
  const int K = static_cast<int>(tgrid.size());
  const int J = static_cast<int>(nugrid.size());
  const double dt = (T - tgrid.front()) / (K - 1);
  const int k = std::min(K - 2, static_cast<int>((t - tgrid.front()) / dt));
  const double s = (t - tgrid[k]) / dt;

  int j;
  double u;
  bool ext = false;
  if (nu <= nugrid.front()) {
    j = 0;
    u = (nu - nugrid[0]) / (nugrid[1] - nugrid[0]);
    ext = nu < nugrid.front() - 1e-12;
  } else if (nu >= nugrid.back()) {
    j = J - 2;
    u = (nu - nugrid[J - 2]) / (nugrid[J - 1] - nugrid[J - 2]);
    ext = nu > nugrid.back() + 1e-12;
  } else {
    j = static_cast<int>(std::upper_bound(nugrid.begin(), nugrid.end(), nu) -
                         nugrid.begin()) - 1;
    j = std::clamp(j, 0, J - 2);
    u = (nu - nugrid[j]) / (nugrid[j + 1] - nugrid[j]);
  }
  if (extrapolated) *extrapolated = ext;

  auto slice_value = [&](int kk) -> Vec {
    return (1 - u) * table[kk * J + j] + u * table[kk * J + j + 1];
  };
  if (s == 0.0) return slice_value(k);
  if (t_interp == Interp::linear || K < 4)
    return (1 - s) * slice_value(k) + s * slice_value(k + 1);
  // Hermite with 4th-order slope estimates where the stencil allows, so the
  // interpolant error is O(dt^4).
  auto slope = [&](int kk) -> Vec {
    if (kk >= 2 && kk + 2 <= K - 1)
      return (-slice_value(kk + 2) + 8 * slice_value(kk + 1) -
              8 * slice_value(kk - 1) + slice_value(kk - 2)) / 12.0;
    if (kk >= 1 && kk + 1 <= K - 1)
      return ((slice_value(kk + 1) - slice_value(kk - 1)) / 2).eval();
    if (kk == 0)
      return (-1.5 * slice_value(0) + 2.0 * slice_value(1) -
              0.5 * slice_value(2)).eval();
    return (1.5 * slice_value(K - 1) - 2.0 * slice_value(K - 2) +
            0.5 * slice_value(K - 3)).eval();
  };
  const Vec p1 = slice_value(k);
  const Vec p2 = slice_value(k + 1);
  const Vec m1 = slope(k);
  const Vec m2 = slope(k + 1);
  const double s2 = s * s, s3 = s2 * s;
  return (2 * s3 - 3 * s2 + 1) * p1 + (s3 - 2 * s2 + s) * m1 +
         (-2 * s3 + 3 * s2) * p2 + (s3 - s2) * m2;
}

}  // namespace

Vec FieldSolution::eval(double t, double nu, bool* extrapolated) const {
  return interp_table(tgrid, nugrid, Phi, t_interp, t, nu, extrapolated,
                      "FieldSolution::eval");
}

Vec FieldSolution::eval_dnu(double t, double nu, bool* extrapolated) const {
  return interp_table(tgrid, nugrid, dPhi, t_interp, t, nu, extrapolated,
                      "FieldSolution::eval_dnu");
}

FieldSolution build_field(const ProblemSpec& spec, const RiccatiSolution& P,
                          const std::vector<double>& tgrid,
                          const std::vector<double>& nugrid,
                          const SolverConfig& cfg, int workers) {
  if (tgrid.empty() || nugrid.empty())
    throw std::invalid_argument("build_field: grids must be nonempty");
  if (std::abs(tgrid.back() - spec.T) > 1e-12)
    throw std::invalid_argument("build_field: tgrid must end at T");

  FieldSolution fs;
  fs.tgrid = tgrid;
  fs.nugrid = nugrid;
  const int K = static_cast<int>(tgrid.size());
  const int J = static_cast<int>(nugrid.size());
  fs.Phi.assign(static_cast<std::size_t>(K) * J, Vec::Zero(spec.n));
  fs.dPhi.assign(static_cast<std::size_t>(K) * J, Vec::Zero(spec.n));

  // Terminal slice is exact.
  for (int j = 0; j < J; ++j) {
    fs.Phi[(K - 1) * J + j] = spec.h2(nugrid[j]);
    fs.dPhi[(K - 1) * J + j] = terminal_slope(spec, nugrid[j]);
  }

  // Every (t_k, nu_j) is an independent solve; nodes within a row share the
  // sampled coefficients and reuse the previous node's curves as Picard seed.
  std::exception_ptr first_error = nullptr;
  std::mutex err_mutex;
  auto solve_row = [&](int k) {
    const double t0 = tgrid[k];
    StageCache cache;
    Curves warm;
    bool have_warm = false;
    for (int j = 0; j < J; ++j) {
      try {
        ChainResult chain = solve_chain(spec, P, t0, nugrid[j], cfg,
                                        have_warm ? &warm : nullptr, &cache);
        if (!chain.converged) throw SolveError("fbode-divergence");
        fs.Phi[k * J + j] = chain.curve.phi[0];
        const bool single_window = chain.windows == 1;
        FbodeTrajectory traj =
            chain_to_trajectory(std::move(chain), t0, spec.T);
        if (single_window) {
          warm = Curves{traj.curve.nu, traj.curve.dnu, traj.curve.phi,
                        traj.curve.dphi};
          have_warm = true;
        } else {
          have_warm = false;
        }
        VariationalIntegrator integ(
            spec, P, traj.curve,
            cache.window_count >= 1 ? &cache.stages : nullptr);
        const Mat M = integ.integrate(nullptr);
        fs.dPhi[k * J + j] =
            solve_matching(spec, M, traj.curve.nu[traj.curve.nodes() - 1]);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) {
          try {
            std::throw_with_nested(
                SolveError("build_field failed at t=" + std::to_string(t0) +
                           " nu=" + std::to_string(nugrid[j])));
          } catch (...) {
            first_error = std::current_exception();
          }
        }
        return;
      }
    }
  };

  int nworkers = workers > 0
                     ? workers
                     : static_cast<int>(std::thread::hardware_concurrency());
  nworkers = std::max(1, std::min(nworkers, K - 1));
  if (nworkers <= 1 || K - 1 <= 1) {
    for (int k = 0; k < K - 1; ++k) solve_row(k);
  } else {
    std::vector<std::thread> pool;
    std::atomic<int> next_row{0};
    for (int w = 0; w < nworkers; ++w) {
      pool.emplace_back([&]() {
        for (;;) {
          const int k = next_row.fetch_add(1);
          if (k >= K - 1) return;
          solve_row(k);
          {
            std::lock_guard<std::mutex> lock(err_mutex);
            if (first_error) return;
          }
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  double lip = 0.0;
  for (int k = 0; k < K; ++k)
    for (int j = 0; j + 1 < J; ++j) {
      const double dnu = nugrid[j + 1] - nugrid[j];
      lip = std::max(
          lip, (fs.at(k, j + 1) - fs.at(k, j)).lpNorm<Eigen::Infinity>() / dnu);
    }
  fs.lip_estimate = lip;
  return fs;
}

PdeResidual phi_pde_residual(const FieldSolution& fs, const ProblemSpec& spec,
                             const RiccatiSolution& P, double t, double nu) {
  const int K = static_cast<int>(fs.tgrid.size());
  const int J = fs.nnu();
  if (K < 3 || J < 3)
    throw std::invalid_argument("phi_pde_residual: grid too small");
  const double dt = (fs.tgrid.back() - fs.tgrid.front()) / (K - 1);
  const int k = static_cast<int>(std::lround((t - fs.tgrid.front()) / dt));
  const double dnu0 = fs.nugrid[1] - fs.nugrid[0];
  const int j = static_cast<int>(std::lround((nu - fs.nugrid.front()) / dnu0));
  if (k <= 0 || k >= K - 1 || j <= 0 || j >= J - 1)
    throw std::out_of_range("phi_pde_residual: (t, nu) not interior");

  PdeResidual out;
  Vec dPhi_dt;
  if (k == K - 2) {
    // next row is the terminal slice; use the one-sided backward stencil
    dPhi_dt = (fs.at(k, j) - fs.at(k - 1, j)) / dt;
    out.one_sided = true;
  } else {
    dPhi_dt = (fs.at(k + 1, j) - fs.at(k - 1, j)) / (2.0 * dt);
  }
  const double tk = fs.tgrid[k];
  const double nuj = fs.nugrid[j];
  const Vec Phi = fs.at(k, j);
  const Vec dPhi_dnu = fs.d_at(k, j);
  const Vec Pt = eval_P(P, tk);
  const Vec b2 = spec.b2(tk);
  const Vec ybar = Pt * nuj + Phi;
  const double b0v = spec.b0(tk, nuj, ybar);
  const double drift = (spec.b1(tk) + b2.dot(Pt)) * nuj + b2.dot(Phi) + b0v;
  out.residual = dPhi_dt + dPhi_dnu * drift + b2.dot(Phi) * Pt +
                 spec.f2(tk) * Phi + spec.f0(tk, nuj, ybar) + b0v * Pt;
  return out;
}

}  // namespace mfbsde
