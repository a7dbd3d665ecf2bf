#include "mfbsde/assumptions.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "mfbsde/rng.hpp"

namespace mfbsde {

std::vector<double> uniform_grid(double T, int count) {
  std::vector<double> g(count + 1);
  for (int k = 0; k <= count; ++k) g[k] = T * k / count;
  return g;
}

std::string pattern_name(Pattern p) {
  switch (p) {
    case Pattern::pos: return "(i)";
    case Pattern::neg: return "(ii)";
    default: return "none";
  }
}

QuotientBundle diff_quotients(const ProblemSpec& spec, double t,
                              const Theta& theta1, const Theta& theta2) {
  const int n = spec.n;
  QuotientBundle q;
  q.b4 = Vec::Zero(n);
  q.f3 = Vec::Zero(n);
  q.f4 = Mat::Zero(n, n);
  q.h2q = Vec::Zero(n);

  auto check = [&](double v, const char* what) {
    if (!std::isfinite(v))
      throw EvaluatorError(std::string(what) +
                           " returned non-finite value in diff_quotients at t=" +
                           std::to_string(t));
    return v;
  };

  const double dx = theta1.xbar - theta2.xbar;
  if (dx != 0.0) {
    q.b3 = check(spec.b0(t, theta1.xbar, theta1.ybar), "b0") -
           check(spec.b0(t, theta2.xbar, theta1.ybar), "b0");
    q.b3 /= dx;
    Vec f0a = spec.f0(t, theta1.xbar, theta1.ybar);
    Vec f0b = spec.f0(t, theta2.xbar, theta1.ybar);
    Vec h2a = spec.h2(theta1.xbar);
    Vec h2b = spec.h2(theta2.xbar);
    if (!f0a.allFinite() || !f0b.allFinite() || !h2a.allFinite() || !h2b.allFinite())
      throw EvaluatorError("f0/h2 returned non-finite value in diff_quotients");
    q.f3 = (f0a - f0b) / dx;
    q.h2q = (h2a - h2b) / dx;
  }

  // Coordinate-by-coordinate sweep in ybar at xbar2: the j-th quotient mixes
  // (ybar2 on 1..j-1, ybar1 on j..n) against (ybar2 on 1..j, ybar1 on j+1..n).
  for (int j = 0; j < n; ++j) {
    const double dy = theta1.ybar[j] - theta2.ybar[j];
    if (dy == 0.0) continue;
    Vec hi = theta1.ybar, lo = theta1.ybar;
    for (int k = 0; k < j; ++k) hi[k] = theta2.ybar[k];
    for (int k = 0; k <= j; ++k) lo[k] = theta2.ybar[k];
    q.b4[j] = (check(spec.b0(t, theta2.xbar, hi), "b0") -
               check(spec.b0(t, theta2.xbar, lo), "b0")) / dy;
    Vec fhi = spec.f0(t, theta2.xbar, hi);
    Vec flo = spec.f0(t, theta2.xbar, lo);
    if (!fhi.allFinite() || !flo.allFinite())
      throw EvaluatorError("f0 returned non-finite value in diff_quotients");
    q.f4.col(j) = (fhi - flo) / dy;
  }
  return q;
}

Constants compute_constants(const ProblemSpec& spec,
                            std::optional<double> lambda) {
  const double K = spec.K, T = spec.T;
  const double n = spec.n;
  Constants c;
  c.M = 2.0 * n * K * (T + 1.0) * std::exp((2.0 * n + 2.0) * K * T);
  c.delta_raw = 1.0 / (2.0 * c.M * (3.0 * c.M * c.M + 4.0));
  c.delta = std::min(c.delta_raw, T);
  c.eps = 1.0 / ((K + (K + 1.0) * T) * (K + (K + 1.0) * T) * std::exp(4.0 * K * T));
  c.eps_tilde = 1.0 / ((2.0 * K + (2.0 * K + 1.0) * T) * (2.0 * K + (2.0 * K + 1.0) * T) *
                       std::exp(8.0 * K * T));
  c.m = static_cast<long long>(std::ceil(T / c.delta - 1e-12));
  c.m = std::max<long long>(1, c.m);
  c.lip_interval = 2.0 * (c.M * c.M + 1.0);
  c.log_lip_global = static_cast<double>(c.m) * std::log(c.lip_interval);
  c.lip_global = std::exp(c.log_lip_global);  // +inf when it overflows
  if (lambda) {
    const double mb = std::max(std::abs(*lambda),
                               (2.0 * K + (2.0 * K + 1.0) * T) * std::exp(4.0 * K * T));
    c.M_bar = mb;
    c.delta_bar = 1.0 / (2.0 * mb * (3.0 * mb * mb + 4.0));
  }
  return c;
}

namespace {

std::string theta_str(const Theta& th) {
  std::ostringstream os;
  os << "(" << th.xbar << ",[";
  for (Eigen::Index i = 0; i < th.ybar.size(); ++i)
    os << (i ? "," : "") << th.ybar[i];
  os << "])";
  return os.str();
}

struct SignCheck {
  // requirement on each quantity under pattern (i); pattern (ii) flips all
  // but the f2 off-diagonal sign.
  double tol = 1e-12;

  bool ge0(double v) const { return v >= -tol; }
  bool le0(double v) const { return v <= tol; }
};

std::vector<std::pair<Theta, Theta>> sample_pairs(const ProblemSpec& spec,
                                                  const SamplerConfig& cfg) {
  std::vector<std::pair<Theta, Theta>> pairs;
  const int n = spec.n;
  const double R = cfg.theta_radius;
  auto lattice_theta = [&](int a, int axis_mix) {
    Theta th;
    const int L = std::max(2, cfg.lattice_per_axis);
    th.xbar = -R + 2.0 * R * a / (L - 1);
    th.ybar = Vec(n);
    for (int i = 0; i < n; ++i) {
      int slot = (a + axis_mix + i) % L;
      th.ybar[i] = -R + 2.0 * R * slot / (L - 1);
    }
    return th;
  };
  const int L = std::max(2, cfg.lattice_per_axis);
  for (int a = 0; a < L; ++a)
    for (int b = 0; b < L; ++b)
      if (a != b || L == 1)
        pairs.emplace_back(lattice_theta(a, 0), lattice_theta(b, 1));
  for (int r = 0; r < cfg.random_pairs; ++r) {
    Theta t1, t2;
    t1.xbar = (rng::uniform01(rng::key(cfg.seed, 11, r, 0)) * 2 - 1) * R;
    t2.xbar = (rng::uniform01(rng::key(cfg.seed, 12, r, 0)) * 2 - 1) * R;
    t1.ybar = Vec(n);
    t2.ybar = Vec(n);
    for (int i = 0; i < n; ++i) {
      t1.ybar[i] = (rng::uniform01(rng::key(cfg.seed, 13, r, i)) * 2 - 1) * R;
      t2.ybar[i] = (rng::uniform01(rng::key(cfg.seed, 14, r, i)) * 2 - 1) * R;
    }
    pairs.emplace_back(std::move(t1), std::move(t2));
  }
  return pairs;
}

bool quotients_affine(const ProblemSpec& spec, const SamplerConfig& cfg,
                      const std::vector<double>& tgrid) {
  // Affine mean-field coefficients have constant quotients: two distinct
  // pairs agreeing entrywise flags them.
  Theta a1{1.7, Vec::Constant(spec.n, -2.3)}, a2{-0.4, Vec::Constant(spec.n, 0.9)};
  Theta b1{-3.1, Vec::Constant(spec.n, 1.1)}, b2{2.2, Vec::Constant(spec.n, -4.0)};
  for (int i = 1; i < spec.n; ++i) {
    a1.ybar[i] += 0.37 * i;
    b2.ybar[i] -= 0.61 * i;
  }
  for (double t : {tgrid.front(), tgrid[tgrid.size() / 2], tgrid.back()}) {
    QuotientBundle qa = diff_quotients(spec, t, a1, a2);
    QuotientBundle qb = diff_quotients(spec, t, b1, b2);
    double gap = std::abs(qa.b3 - qb.b3);
    gap = std::max(gap, (qa.b4 - qb.b4).cwiseAbs().maxCoeff());
    gap = std::max(gap, (qa.f3 - qb.f3).cwiseAbs().maxCoeff());
    gap = std::max(gap, (qa.f4 - qb.f4).cwiseAbs().maxCoeff());
    gap = std::max(gap, (qa.h2q - qb.h2q).cwiseAbs().maxCoeff());
    if (gap > cfg.affine_tolerance) return false;
  }
  return true;
}

}  // namespace

std::string AssumptionReport::to_lines() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    os << condition << " i=" << (i + 1) << " pattern=" << pattern_name(pattern[i])
       << " status=" << (pattern[i] != Pattern::none ? "pass_sampled" : "fail")
       << " points=" << points_checked;
    if (lambda) os << " lambda=" << *lambda;
    os << "\n";
  }
  if (pattern.empty()) {
    os << condition << " status=" << status() << " points=" << points_checked;
    if (lambda) os << " lambda=" << *lambda;
    os << "\n";
  }
  if (!pass && witness) {
    os << condition << " witness: " << witness->condition << " i=" << witness->i;
    if (witness->j) os << " j=" << witness->j;
    os << " t=" << witness->t;
    if (witness->has_theta)
      os << " theta1=" << theta_str(witness->theta1)
         << " theta2=" << theta_str(witness->theta2);
    os << " value=" << witness->measured << " requires " << witness->requirement << "\n";
  }
  return os.str();
}

AssumptionReport check_A2(const ProblemSpec& spec,
                          const std::vector<double>& tgrid) {
  AssumptionReport report;
  report.condition = "A2";
  report.pattern.assign(spec.n, Pattern::none);
  SignCheck sc;
  report.pass = true;

  for (int i = 0; i < spec.n; ++i) {
    bool pos_ok = true, neg_ok = true;
    AssumptionWitness pos_w, neg_w;
    bool pos_w_set = false, neg_w_set = false;
    for (double t : tgrid) {
      const Vec f1 = spec.f1(t);
      const Vec b2 = spec.b2(t);
      const Mat f2 = spec.f2(t);
      auto fail_pos = [&](const char* cond, double v, const char* req, int j = 0) {
        pos_ok = false;
        if (!pos_w_set) {
          pos_w = {cond, i + 1, j, t, {}, {}, false, v, req};
          pos_w_set = true;
        }
      };
      auto fail_neg = [&](const char* cond, double v, const char* req, int j = 0) {
        neg_ok = false;
        if (!neg_w_set) {
          neg_w = {cond, i + 1, j, t, {}, {}, false, v, req};
          neg_w_set = true;
        }
      };
      if (!sc.ge0(f1[i])) fail_pos("f1", f1[i], ">= 0");
      if (!sc.ge0(spec.h1[i])) fail_pos("h1", spec.h1[i], ">= 0");
      if (!sc.le0(b2[i])) fail_pos("b2", b2[i], "<= 0");
      if (!sc.le0(f1[i])) fail_neg("f1", f1[i], "<= 0");
      if (!sc.le0(spec.h1[i])) fail_neg("h1", spec.h1[i], "<= 0");
      if (!sc.ge0(b2[i])) fail_neg("b2", b2[i], ">= 0");
      for (int j = 0; j < spec.n; ++j) {
        if (j == i) continue;
        if (!sc.ge0(f2(i, j))) {
          fail_pos("f2", f2(i, j), ">= 0", j + 1);
          fail_neg("f2", f2(i, j), ">= 0", j + 1);
        }
      }
      ++report.points_checked;
      if (!pos_ok && !neg_ok) break;
    }
    if (pos_ok)
      report.pattern[i] = Pattern::pos;
    else if (neg_ok)
      report.pattern[i] = Pattern::neg;
    else {
      report.pass = false;
      if (!report.witness) report.witness = pos_w_set ? pos_w : neg_w;
      if (pos_w_set) report.all_witnesses.push_back(pos_w);
      if (neg_w_set) report.all_witnesses.push_back(neg_w);
    }
  }
  return report;
}

AssumptionReport check_A3(const ProblemSpec& spec,
                          const std::vector<double>& tgrid,
                          const SamplerConfig& sampler) {
  AssumptionReport report;
  report.condition = "A3";
  report.pattern.assign(spec.n, Pattern::none);
  SignCheck sc{sampler.sign_tolerance};
  report.pass = true;

  std::vector<std::pair<Theta, Theta>> pairs;
  if (quotients_affine(spec, sampler, tgrid)) {
    // one generic pair suffices for affine coefficients
    Theta t1{1.0, Vec::Constant(spec.n, 1.0)}, t2{0.0, Vec::Zero(spec.n)};
    for (int i = 1; i < spec.n; ++i) t1.ybar[i] = 1.0 + 0.5 * i;
    pairs.emplace_back(t1, t2);
  } else {
    pairs = sample_pairs(spec, sampler);
  }

  struct Quantities {
    double f13, h12, b24;
    Vec f24_offdiag_min;  // per row minimum over off-diagonal entries
  };

  for (int i = 0; i < spec.n; ++i) {
    bool pos_ok = true, neg_ok = true;
    AssumptionWitness pos_w, neg_w;
    bool pos_w_set = false, neg_w_set = false;
    for (double t : tgrid) {
      const Vec f1 = spec.f1(t);
      const Vec b2 = spec.b2(t);
      const Mat f2 = spec.f2(t);
      for (const auto& [th1, th2] : pairs) {
        QuotientBundle q = diff_quotients(spec, t, th1, th2);
        const double f13 = f1[i] + q.f3[i];
        const double h12 = spec.h1[i] + q.h2q[i];
        const double b24 = b2[i] + q.b4[i];
        auto fail_pos = [&](const char* cond, double v, const char* req, int j = 0) {
          pos_ok = false;
          if (!pos_w_set) {
            pos_w = {cond, i + 1, j, t, th1, th2, true, v, req};
            pos_w_set = true;
          }
        };
        auto fail_neg = [&](const char* cond, double v, const char* req, int j = 0) {
          neg_ok = false;
          if (!neg_w_set) {
            neg_w = {cond, i + 1, j, t, th1, th2, true, v, req};
            neg_w_set = true;
          }
        };
        if (!sc.ge0(f13)) fail_pos("f1+f3", f13, ">= 0");
        if (!sc.ge0(h12)) fail_pos("h1+h2q", h12, ">= 0");
        if (!sc.le0(b24)) fail_pos("b2+b4", b24, "<= 0");
        if (!sc.le0(f13)) fail_neg("f1+f3", f13, "<= 0");
        if (!sc.le0(h12)) fail_neg("h1+h2q", h12, "<= 0");
        if (!sc.ge0(b24)) fail_neg("b2+b4", b24, ">= 0");
        for (int j = 0; j < spec.n; ++j) {
          if (j == i) continue;
          const double f24 = f2(i, j) + q.f4(i, j);
          if (!sc.ge0(f24)) {
            fail_pos("f2+f4", f24, ">= 0", j + 1);
            fail_neg("f2+f4", f24, ">= 0", j + 1);
          }
        }
        ++report.points_checked;
      }
      if (!pos_ok && !neg_ok) break;
    }
    if (pos_ok)
      report.pattern[i] = Pattern::pos;
    else if (neg_ok)
      report.pattern[i] = Pattern::neg;
    else {
      report.pass = false;
      if (!report.witness) report.witness = pos_w_set ? pos_w : neg_w;
      if (pos_w_set) report.all_witnesses.push_back(pos_w);
      if (neg_w_set) report.all_witnesses.push_back(neg_w);
    }
  }
  return report;
}

namespace {

// Shared scan for B1/B2. Feasibility of a candidate lambda is evaluated by
// `margin(lambda, pattern)`: the worst (most negative) slack across the
// constraints; >= -tol means feasible.
template <typename MarginFn>
std::optional<double> scan_lambda(const ProblemSpec& spec,
                                  const LambdaSearchConfig& cfg, Pattern pat,
                                  MarginFn margin, double tol) {
  const double radius =
      cfg.radius > 0 ? cfg.radius : 10.0 * spec.K * (1.0 + spec.T);
  // Remark-style candidates first: lambda = 0, then the terminal slope h1.
  std::vector<double> candidates = {0.0, spec.h1[0]};
  for (int g = 0; g < cfg.grid; ++g)
    candidates.push_back(-radius + 2.0 * radius * g / (cfg.grid - 1));
  double best_l = 0.0, best_m = -std::numeric_limits<double>::infinity();
  for (double l : candidates) {
    const double m = margin(l, pat);
    if (m >= -tol) return l;
    if (m > best_m) {
      best_m = m;
      best_l = l;
    }
  }
  // Golden-section refinement of the margin around the best scan point.
  const double gr = 0.6180339887498949;
  double lo = best_l - 2.0 * radius / (cfg.grid - 1);
  double hi = best_l + 2.0 * radius / (cfg.grid - 1);
  double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
  double m1 = margin(x1, pat), m2 = margin(x2, pat);
  for (int it = 0; it < 80; ++it) {
    if (m1 < m2) {
      lo = x1; x1 = x2; m1 = m2;
      x2 = lo + gr * (hi - lo); m2 = margin(x2, pat);
    } else {
      hi = x2; x2 = x1; m2 = m1;
      x1 = hi - gr * (hi - lo); m1 = margin(x1, pat);
    }
    if (std::max(m1, m2) >= -tol) return m1 >= m2 ? x1 : x2;
  }
  return std::nullopt;
}

}  // namespace

AssumptionReport check_B1(const ProblemSpec& spec,
                          const LambdaSearchConfig& search) {
  if (spec.n != 1)
    throw std::invalid_argument("check_B1 requires n = 1");
  AssumptionReport report;
  report.condition = "B1";
  const Constants c = compute_constants(spec);
  const double tol = search.sampler.sign_tolerance;

  auto tgrid = uniform_grid(spec.T, search.t_samples - 1);
  auto F0 = [&](double t, double y) {
    return spec.f1(t)[0] + (spec.b1(t) + spec.f2(t)(0, 0)) * y +
           spec.b2(t)[0] * y * y;
  };
  // margin: min over t of the constraint slacks; sign conventions per pattern.
  auto margin = [&](double l, Pattern pat) {
    double m = std::numeric_limits<double>::infinity();
    if (pat == Pattern::pos) {
      m = std::min(m, spec.h1[0] - l);  // lambda <= h1
      for (double t : tgrid) {
        m = std::min(m, F0(t, l));              // F0 >= 0
        m = std::min(m, c.eps - spec.b2(t)[0]); // b2 <= eps
      }
    } else {
      m = std::min(m, l - spec.h1[0]);
      for (double t : tgrid) {
        m = std::min(m, -F0(t, l));
        m = std::min(m, spec.b2(t)[0] + c.eps);
      }
    }
    return m;
  };
  auto revalidate = [&](double l, Pattern pat) {
    auto fine = uniform_grid(spec.T, 4 * (search.t_samples - 1));
    double m = std::numeric_limits<double>::infinity();
    for (double t : fine) {
      const double s = (pat == Pattern::pos) ? 1.0 : -1.0;
      m = std::min(m, s * F0(t, l));
      m = std::min(m, (pat == Pattern::pos) ? c.eps - spec.b2(t)[0]
                                            : spec.b2(t)[0] + c.eps);
    }
    m = std::min(m, (pat == Pattern::pos) ? spec.h1[0] - l : l - spec.h1[0]);
    return m >= -tol;
  };

  for (Pattern pat : {Pattern::pos, Pattern::neg}) {
    auto l = scan_lambda(spec, search, pat, margin, tol);
    if (l && revalidate(*l, pat)) {
      report.pass = true;
      report.lambda = *l;
      report.pattern = {pat};
      report.points_checked = search.t_samples * search.grid;
      return report;
    }
  }
  report.pass = false;
  report.pattern = {Pattern::none};
  report.points_checked = search.t_samples * search.grid;
  AssumptionWitness w;
  w.condition = "B1";
  w.i = 1;
  w.t = spec.T / 2;
  w.measured = margin(0.0, Pattern::pos);
  w.requirement = "feasible lambda in either pattern";
  report.witness = w;
  return report;
}

AssumptionReport check_B2(const ProblemSpec& spec,
                          const LambdaSearchConfig& search) {
  if (spec.n != 1)
    throw std::invalid_argument("check_B2 requires n = 1");
  AssumptionReport report;
  report.condition = "B2";
  const Constants c = compute_constants(spec);
  const double tol = search.sampler.sign_tolerance;

  auto tgrid = uniform_grid(spec.T, search.t_samples - 1);
  std::vector<std::pair<Theta, Theta>> pairs;
  if (quotients_affine(spec, search.sampler, tgrid)) {
    pairs.push_back({Theta{1.0, Vec::Constant(1, 1.0)}, Theta{0.0, Vec::Zero(1)}});
  } else {
    pairs = sample_pairs(spec, search.sampler);
  }

  auto margin = [&](double l, Pattern pat) {
    double m = std::numeric_limits<double>::infinity();
    const double s = (pat == Pattern::pos) ? 1.0 : -1.0;
    for (double t : tgrid) {
      const double f1 = spec.f1(t)[0], b1 = spec.b1(t), f2 = spec.f2(t)(0, 0),
                   b2 = spec.b2(t)[0];
      for (const auto& [th1, th2] : pairs) {
        QuotientBundle q = diff_quotients(spec, t, th1, th2);
        const double F = (f1 + q.f3[0]) + (b1 + q.b3 + f2 + q.f4(0, 0)) * l +
                         (b2 + q.b4[0]) * l * l;
        m = std::min(m, s * F);
        m = std::min(m, s * (spec.h1[0] + q.h2q[0] - l));
        m = std::min(m, (pat == Pattern::pos) ? c.eps_tilde - (b2 + q.b4[0])
                                              : (b2 + q.b4[0]) + c.eps_tilde);
        if (m < -1e6) return m;  // hopeless, cut the scan short
      }
    }
    return m;
  };
  auto revalidate = [&](double l, Pattern pat) { return margin(l, pat) >= -tol; };

  for (Pattern pat : {Pattern::pos, Pattern::neg}) {
    auto l = scan_lambda(spec, search, pat, margin, tol);
    if (l && revalidate(*l, pat)) {
      report.pass = true;
      report.lambda = *l;
      report.pattern = {pat};
      report.points_checked =
          static_cast<int>(tgrid.size() * pairs.size()) * search.grid;
      return report;
    }
  }
  report.pass = false;
  report.pattern = {Pattern::none};
  report.points_checked =
      static_cast<int>(tgrid.size() * pairs.size()) * search.grid;
  AssumptionWitness w;
  w.condition = "B2";
  w.i = 1;
  w.t = spec.T / 2;
  w.measured = margin(0.0, Pattern::pos);
  w.requirement = "feasible lambda in either pattern";
  report.witness = w;
  return report;
}

}  // namespace mfbsde
