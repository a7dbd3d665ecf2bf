#include "mfbsde/particles.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <thread>

#include "mfbsde/assumptions.hpp"
#include "mfbsde/rng.hpp"

namespace mfbsde {

namespace {

constexpr int kBlock = 4096;  // fixed reduction block, independent of workers

double draw_initial(const InitLaw& init, std::uint64_t seed, std::uint64_t p) {
  switch (init.kind) {
    case InitLaw::Kind::point_mass:
      return init.mean;
    case InitLaw::Kind::normal:
      return init.mean + init.spread * rng::normal(seed, p, rng::kInitStep, 0);
    case InitLaw::Kind::uniform: {
      const double u = rng::uniform01(rng::key(seed, p, rng::kInitStep, 0));
      return init.mean + init.spread * (2.0 * u - 1.0);
    }
  }
  return init.mean;
}

struct StepCoeffs {
  double b1;
  Vec b2, f1;
  Mat f2;
  Vec P;
};

// Runs fn(block_index) over the blocks on `workers` threads; exceptions from
// worker threads are rethrown on the calling thread.
template <typename Fn>
void parallel_blocks(int nblocks, int workers, Fn&& fn) {
  if (workers <= 1 || nblocks <= 1) {
    for (int b = 0; b < nblocks; ++b) fn(b);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error = nullptr;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  const int nthreads = std::min(workers, nblocks);
  for (int w = 0; w < nthreads; ++w)
    pool.emplace_back([&]() {
      for (;;) {
        const int b = next.fetch_add(1);
        if (b >= nblocks) return;
        try {
          fn(b);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

SimulationOutput simulate(const ProblemSpec& spec, const MasterField& mf,
                          double nu0, const InitLaw& init, int N, int steps,
                          std::uint64_t seed, MeanMode mode,
                          const SimulateConfig& cfg) {
  if (N < 2) throw std::invalid_argument("simulate: N must be >= 2");
  if (steps < 1) throw std::invalid_argument("simulate: steps must be >= 1");
  if (std::abs(init.mean - nu0) > 1e-12)
    throw std::invalid_argument("simulate: init law mean must equal nu0");

  const int n = spec.n, d = spec.d;
  const double T = spec.T;
  const double dt = T / steps;
  const double sqdt = std::sqrt(dt);
  const int nblocks = (N + kBlock - 1) / kBlock;
  const int workers = cfg.workers > 0
                          ? cfg.workers
                          : static_cast<int>(std::thread::hardware_concurrency());

  SimulationOutput out;
  out.mode = mode;
  out.ensemble.N = N;
  out.ensemble.seed = seed;
  out.ensemble.tgrid.resize(steps + 1);
  for (int k = 0; k <= steps; ++k) out.ensemble.tgrid[k] = T * k / steps;
  const std::size_t path_entries =
      static_cast<std::size_t>(N) * (steps + 1);
  out.ensemble.paths_stored = path_entries <= cfg.path_cap;
  if (out.ensemble.paths_stored) out.ensemble.X.resize(path_entries);

  // Coefficients and P on the simulation grid.
  std::vector<StepCoeffs> coeff(steps + 1);
  for (int k = 0; k <= steps; ++k) {
    const double t = out.ensemble.tgrid[k];
    coeff[k] = {spec.b1(t), spec.b2(t), spec.f1(t), spec.f2(t), eval_P(mf.P, t)};
  }

  // Reference mean path: the FBODE mean dynamics discretized with the same
  // explicit stepping as the particles, so a noiseless ensemble reproduces
  // it exactly.
  out.nu_path.resize(steps + 1);
  out.nu_path[0] = nu0;
  for (int k = 0; k < steps; ++k) {
    const double t = out.ensemble.tgrid[k];
    const double nu = out.nu_path[k];
    const Vec ybar = coeff[k].P * nu + mf.Phi.eval(t, nu);
    out.nu_path[k + 1] =
        nu + (coeff[k].b1 * nu + coeff[k].b2.dot(ybar) +
              spec.b0(t, nu, ybar)) * dt;
  }

  // Initial ensemble + precondition on the sample mean.
  std::vector<double> X(N), Xnext(N);
  for (int p = 0; p < N; ++p) X[p] = draw_initial(init, seed, p);
  {
    double s = 0.0, s2 = 0.0;
    for (int p = 0; p < N; ++p) s += X[p];
    const double mean = s / N;
    for (int p = 0; p < N; ++p) s2 += (X[p] - mean) * (X[p] - mean);
    const double sd = std::sqrt(s2 / (N - 1));
    if (std::abs(mean - nu0) > 3.0 * sd / std::sqrt(double(N)) + 1e-12)
      throw SolveError("simulate: init sample mean " + std::to_string(mean) +
                       " is more than 3 standard errors from nu0");
  }

  // Per-particle streaming state for the backward-equation diagnostics.
  std::vector<Vec> Yprev(N, Vec::Zero(n)), pend(N, Vec::Zero(n));
  std::vector<Vec> prefix(N, Vec::Zero(n)), prefix_sum(N, Vec::Zero(n));
  std::vector<Vec> pref_min(N, Vec::Zero(n)), pref_max(N, Vec::Zero(n));
  std::vector<double> prefix_sq(N, 0.0);

  std::vector<double> block_sum(nblocks), block_sq(nblocks);
  std::vector<double> block_maxX(nblocks), block_maxY(nblocks), block_maxZ(nblocks);
  std::vector<double> block_res_sq(nblocks);

  out.empirical_mean_X.resize(steps + 1);
  out.empirical_std_X.resize(steps + 1);
  out.P_path.resize(steps + 1);
  out.Phi_path.resize(steps + 1);

  double res_sq_total = 0.0;
  double maxX = 0.0, maxY = 0.0, maxZ = 0.0, mean_gap = 0.0;

  for (int k = 0; k <= steps; ++k) {
    const double t = out.ensemble.tgrid[k];
    const StepCoeffs& c = coeff[k];

    // empirical mean / std of X_k (fixed block order)
    parallel_blocks(nblocks, workers, [&](int b) {
      const int lo = b * kBlock, hi = std::min(N, lo + kBlock);
      double s = 0.0;
      for (int p = lo; p < hi; ++p) s += X[p];
      block_sum[b] = s;
    });
    double sum = 0.0;
    for (int b = 0; b < nblocks; ++b) sum += block_sum[b];
    const double mean = sum / N;
    parallel_blocks(nblocks, workers, [&](int b) {
      const int lo = b * kBlock, hi = std::min(N, lo + kBlock);
      double s = 0.0;
      for (int p = lo; p < hi; ++p) s += (X[p] - mean) * (X[p] - mean);
      block_sq[b] = s;
    });
    double sq = 0.0;
    for (int b = 0; b < nblocks; ++b) sq += block_sq[b];
    out.empirical_mean_X[k] = mean;
    out.empirical_std_X[k] = std::sqrt(sq / (N - 1));
    mean_gap = std::max(mean_gap, std::abs(mean - out.nu_path[k]));

    const double nu_k =
        (mode == MeanMode::fbode_mean) ? out.nu_path[k] : mean;
    const Vec Phi_k = mf.Phi.eval(t, nu_k);
    const Vec ybar_k = c.P * nu_k + Phi_k;
    out.P_path[k] = c.P;
    out.Phi_path[k] = Phi_k;
    const double b0_k = spec.b0(t, nu_k, ybar_k);
    const Vec f0_k = spec.f0(t, nu_k, ybar_k);

    if (out.ensemble.paths_stored)
      for (int p = 0; p < N; ++p)
        out.ensemble.X[static_cast<std::size_t>(p) * (steps + 1) + k] = X[p];

    const bool last = (k == steps);
    parallel_blocks(nblocks, workers, [&](int b) {
      const int lo = b * kBlock, hi = std::min(N, lo + kBlock);
      double bmaxX = 0.0, bmaxY = 0.0, bmaxZ = 0.0, bres = 0.0;
      Vec Y(n), G(n), sig(d), ZdW(n);
      for (int p = lo; p < hi; ++p) {
        Y = c.P * X[p] + Phi_k;
        bmaxX = std::max(bmaxX, std::abs(X[p]));
        bmaxY = std::max(bmaxY, Y.lpNorm<Eigen::Infinity>());
        if (k > 0) {
          // finalize residual of the previous interval
          Vec r = Y - Yprev[p] + pend[p];
          bres += r.squaredNorm();
          prefix_sum[p] += prefix[p];
          prefix_sq[p] += prefix[p].squaredNorm();
          pref_min[p] = pref_min[p].cwiseMin(prefix[p]);
          pref_max[p] = pref_max[p].cwiseMax(prefix[p]);
          prefix[p] += r;
        }
        if (!last) {
          sig = spec.sigma(t, X[p], Y, nu_k, ybar_k);
          double sdW = 0.0;
          for (int c2 = 0; c2 < d; ++c2)
            sdW += sig[c2] * (sqdt * rng::normal(seed, p, k, c2));
          const double drift = c.b1 * X[p] + c.b2.dot(Y) + b0_k;
          const double xn = X[p] + drift * dt + sdW;
          if (!std::isfinite(xn))
            throw SolveError("simulate: non-finite state at particle " +
                             std::to_string(p) + " step " + std::to_string(k));
          Xnext[p] = xn;
          G = c.f1 * X[p] + c.f2 * Y + f0_k;
          ZdW = c.P * sdW;  // Z dW = P (sigma·dW)
          pend[p] = G * dt - ZdW;
          Yprev[p] = Y;
          bmaxZ = std::max(bmaxZ,
                           c.P.lpNorm<Eigen::Infinity>() *
                               sig.lpNorm<Eigen::Infinity>());
        }
      }
      block_maxX[b] = bmaxX;
      block_maxY[b] = bmaxY;
      block_maxZ[b] = bmaxZ;
      block_res_sq[b] = bres;
    });
    for (int b = 0; b < nblocks; ++b) {
      maxX = std::max(maxX, block_maxX[b]);
      maxY = std::max(maxY, block_maxY[b]);
      maxZ = std::max(maxZ, block_maxZ[b]);
      res_sq_total += block_res_sq[b];
    }
    if (!last) std::swap(X, Xnext);
  }

  // Defect statistics: defect_k = S - prefix_k with S the full residual sum.
  double defect_sq = 0.0, defect_max = 0.0;
  for (int p = 0; p < N; ++p) {
    const Vec& S = prefix[p];
    defect_sq += steps * S.squaredNorm() - 2.0 * S.dot(prefix_sum[p]) +
                 prefix_sq[p];
    for (int i = 0; i < n; ++i)
      defect_max = std::max({defect_max, std::abs(S[i] - pref_min[p][i]),
                             std::abs(S[i] - pref_max[p][i])});
  }
  out.bsde.step_rms = std::sqrt(res_sq_total / (double(N) * steps));
  out.bsde.defect_rms = std::sqrt(std::max(0.0, defect_sq) / (double(N) * steps));
  out.bsde.defect_max = defect_max;

  // Terminal identity gap at the final node.
  {
    const double nu_T = (mode == MeanMode::fbode_mean)
                            ? out.nu_path[steps]
                            : out.empirical_mean_X[steps];
    const Vec h2T = spec.h2(nu_T);
    double gap = 0.0;
    for (int p = 0; p < N; ++p) {
      // Y_T = P_T X + Phi(T, nu_T); P_T = h1 exactly on the grid
      const Vec yT = coeff[steps].P * X[p] + out.Phi_path[steps];
      gap = std::max(gap, (yT - spec.h1 * X[p] - h2T).lpNorm<Eigen::Infinity>());
    }
    out.bsde.terminal_gap = gap;
  }

  out.bsde_rms = out.bsde.defect_rms;
  out.mean_gap = mean_gap;
  out.max_abs_X = maxX;
  out.max_abs_Y = maxY;
  out.max_abs_Z = maxZ;
  return out;
}

BsdeStats bsde_residual(const SimulationOutput& out, const ProblemSpec& spec) {
  if (!out.ensemble.paths_stored) return out.bsde;

  const int N = out.ensemble.N;
  const int steps = static_cast<int>(out.ensemble.tgrid.size()) - 1;
  const int n = spec.n, d = spec.d;
  const double dt = out.ensemble.tgrid[1] - out.ensemble.tgrid[0];
  const double sqdt = std::sqrt(dt);

  // Mean source actually used during the run.
  auto nu_at = [&](int k) {
    return out.mode == MeanMode::fbode_mean ? out.nu_path[k]
                                            : out.empirical_mean_X[k];
  };

  double res_sq = 0.0, defect_sq = 0.0, defect_max = 0.0, terminal = 0.0;
  std::vector<Vec> r(steps, Vec::Zero(n));
  for (int p = 0; p < N; ++p) {
    const double* Xp = &out.ensemble.X[static_cast<std::size_t>(p) * (steps + 1)];
    for (int k = 0; k < steps; ++k) {
      const double t = out.ensemble.tgrid[k];
      const double nu_k = nu_at(k);
      const Vec& P = out.P_path[k];
      const Vec Y = P * Xp[k] + out.Phi_path[k];
      const Vec Y1 = out.P_path[k + 1] * Xp[k + 1] + out.Phi_path[k + 1];
      const Vec ybar = P * nu_k + out.Phi_path[k];
      const Vec G = spec.f1(t) * Xp[k] + spec.f2(t) * Y + spec.f0(t, nu_k, ybar);
      const Vec sig = spec.sigma(t, Xp[k], Y, nu_k, ybar);
      double sdW = 0.0;
      for (int c = 0; c < d; ++c)
        sdW += sig[c] * (sqdt * rng::normal(out.ensemble.seed, p, k, c));
      r[k] = Y1 - Y + G * dt - P * sdW;
      res_sq += r[k].squaredNorm();
    }
    Vec defect = Vec::Zero(n);
    for (int k = steps - 1; k >= 0; --k) {
      defect += r[k];
      defect_sq += defect.squaredNorm();
      defect_max = std::max(defect_max, defect.lpNorm<Eigen::Infinity>());
    }
    const double nu_T = nu_at(steps);
    const Vec yT = out.P_path[steps] * Xp[steps] + out.Phi_path[steps];
    terminal = std::max(
        terminal, (yT - spec.h1 * Xp[steps] - spec.h2(nu_T)).lpNorm<Eigen::Infinity>());
  }
  BsdeStats stats;
  stats.step_rms = std::sqrt(res_sq / (double(N) * steps));
  stats.defect_rms = std::sqrt(defect_sq / (double(N) * steps));
  stats.defect_max = defect_max;
  stats.terminal_gap = terminal;
  return stats;
}

StabilityRecord stability_experiment(const ProblemSpec& spec,
                                     const MasterField& mf, double nu0_a,
                                     double nu0_b, int steps) {
  if (nu0_a == nu0_b)
    throw std::invalid_argument("stability_experiment: initial means must differ");
  SolverConfig cfg;
  cfg.steps_per_unit = std::max(2, static_cast<int>(steps / spec.T));
  FbodeTrajectory ta = solve_fbode(spec, mf.P, 0.0, nu0_a, cfg);
  FbodeTrajectory tb = solve_fbode(spec, mf.P, 0.0, nu0_b, cfg);
  const std::size_t m = std::min(ta.tgrid.size(), tb.tgrid.size());
  double gap_nu = 0.0, gap_y = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double t = ta.tgrid[i];
    const Vec P = eval_P(mf.P, t);
    gap_nu = std::max(gap_nu, std::abs(ta.nu[i] - tb.nu[i]));
    const Vec ya = P * ta.nu[i] + ta.phi[i];
    const Vec yb = P * tb.nu[i] + tb.phi[i];
    gap_y = std::max(gap_y, (ya - yb).norm());
  }
  StabilityRecord rec;
  const double dnu = nu0_a - nu0_b;
  rec.ratio = (gap_nu * gap_nu + gap_y * gap_y) / (dnu * dnu);
  rec.lip_global = compute_constants(spec).lip_global;
  rec.within_bound = rec.ratio <= rec.lip_global;
  return rec;
}

}  // namespace mfbsde
