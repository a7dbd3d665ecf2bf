#include "mfbsde/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "mfbsde/expr.hpp"

namespace mfbsde {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) parts.push_back(trim(item));
  return parts;
}

}  // namespace

KeyValueConfig KeyValueConfig::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_text(ss.str(), path);
}

KeyValueConfig KeyValueConfig::parse_text(const std::string& text,
                                          const std::string& origin) {
  KeyValueConfig cfg;
  cfg.origin_ = origin;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                               ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": empty key");
    cfg.entries_[key] = value;
  }
  return cfg;
}

bool KeyValueConfig::has(const std::string& key) const {
  return entries_.count(key) > 0;
}

std::string KeyValueConfig::get_string(const std::string& key,
                                       const std::string& dflt) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? dflt : it->second;
}

double KeyValueConfig::get_double(const std::string& key, double dflt) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return dflt;
  std::size_t pos = 0;
  double v = std::stod(it->second, &pos);
  if (pos != it->second.size())
    throw std::runtime_error("config key " + key + ": not a number: " + it->second);
  return v;
}

int KeyValueConfig::get_int(const std::string& key, int dflt) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return dflt;
  return std::stoi(it->second);
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key,
                                      std::uint64_t dflt) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return dflt;
  return std::stoull(it->second);
}

bool KeyValueConfig::get_bool(const std::string& key, bool dflt) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return dflt;
  std::string v = it->second;
  std::transform(v.begin(), v.end(), v.begin(), ::tolower);
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw std::runtime_error("config key " + key + ": not a boolean: " + it->second);
}

std::map<std::string, std::string> KeyValueConfig::section(
    const std::string& prefix) const {
  std::map<std::string, std::string> out;
  const std::string p = prefix + ".";
  for (const auto& [k, v] : entries_)
    if (k.rfind(p, 0) == 0) out[k.substr(p.size())] = v;
  return out;
}

RunConfig RunConfig::from_config(const KeyValueConfig& kv) {
  RunConfig rc;
  rc.preset = kv.get_string("problem.preset", "");
  rc.n = kv.get_int("problem.n", 1);
  rc.d = kv.get_int("problem.d", 1);
  rc.T = kv.get_double("problem.T", 1.0);
  if (kv.has("problem.K")) rc.K = kv.get_double("problem.K", 1.0);
  for (const auto& [k, v] : kv.section("problem.params"))
    rc.params[k] = std::stod(v);
  for (const char* name : {"b1", "b2", "f1", "f2", "b0", "f0", "sigma", "h1", "h2"}) {
    std::string key = std::string("problem.") + name;
    if (kv.has(key)) rc.coefficient_exprs[name] = kv.get_string(key, "");
  }

  rc.grids.t_steps = kv.get_int("grids.t_steps", rc.grids.t_steps);
  rc.grids.t_slices = kv.get_int("grids.t_slices", rc.grids.t_slices);
  rc.grids.nu_min = kv.get_double("grids.nu_min", rc.grids.nu_min);
  rc.grids.nu_max = kv.get_double("grids.nu_max", rc.grids.nu_max);
  rc.grids.nu_steps = kv.get_int("grids.nu_steps", rc.grids.nu_steps);
  rc.grids.x_min = kv.get_double("grids.x_min", rc.grids.x_min);
  rc.grids.x_max = kv.get_double("grids.x_max", rc.grids.x_max);
  rc.grids.x_steps = kv.get_int("grids.x_steps", rc.grids.x_steps);
  if (rc.grids.t_steps < 1 || rc.grids.t_slices < 2 || rc.grids.nu_steps < 1 ||
      rc.grids.x_steps < 1)
    throw std::runtime_error("grids: step counts must be >= 1");
  if (!(rc.grids.nu_min < rc.grids.nu_max) || !(rc.grids.x_min < rc.grids.x_max))
    throw std::runtime_error("grids: ranges must be strictly increasing");

  rc.sim.N = kv.get_int("sim.N", rc.sim.N);
  rc.sim.seed = kv.get_u64("sim.seed", rc.sim.seed);
  rc.sim.mode = kv.get_string("sim.mode", rc.sim.mode);

  rc.tol.solver_tol = kv.get_double("tol.solver", rc.tol.solver_tol);
  rc.tol.zero_solution = kv.get_double("tol.zero_solution", rc.tol.zero_solution);
  rc.tol.cross_check = kv.get_double("tol.cross_check", rc.tol.cross_check);
  rc.tol.decomposition = kv.get_double("tol.decomposition", rc.tol.decomposition);
  rc.tol.gradient_rel = kv.get_double("tol.gradient_rel", rc.tol.gradient_rel);
  rc.tol.residual_decay = kv.get_double("tol.residual_decay", rc.tol.residual_decay);

  rc.out_dir = kv.get_string("out", rc.out_dir);
  rc.strict = kv.get_bool("strict", false);
  if (rc.strict) rc.tol.scale_strict();
  return rc;
}

namespace {

// Expression-backed evaluators. Every component list is ';'-separated.
std::vector<CoefficientExpr> parse_components(const std::string& src,
                                              const std::map<std::string, double>& params,
                                              int n, int expected,
                                              const std::string& what) {
  std::vector<CoefficientExpr> out;
  for (const auto& piece : split(src, ';'))
    out.push_back(CoefficientExpr::parse(piece, params, n));
  if (static_cast<int>(out.size()) != expected)
    throw std::runtime_error(what + ": expected " + std::to_string(expected) +
                             " ';'-separated expressions, got " +
                             std::to_string(out.size()));
  return out;
}

}  // namespace

ProblemSpec RunConfig::build_problem() const {
  if (preset == "example1") {
    return preset_example1(params.at("alpha"), params.at("lambda"),
                           params.at("theta"), T);
  }
  if (preset == "example2") {
    return preset_example2(params.at("alpha"), params.at("beta"),
                           params.at("lambda"), params.at("theta"), T);
  }
  if (preset == "example3") {
    auto p = [&](const char* k, double dflt) {
      auto it = params.find(k);
      return it == params.end() ? dflt : it->second;
    };
    LqCoefficients lq = LqCoefficients::constants(
        p("A", 0.2), p("Abar", 0.1), p("B", 1.0), p("Bbar", 0.5), p("Q", 1.0),
        p("Qbar", 0.25), p("R", 1.0), p("Rbar", 0.5), p("G", 1.0),
        p("Gbar", 0.5), p("sigma", 0.3), T);
    return preset_example3(lq);
  }
  if (!preset.empty())
    throw std::runtime_error("unknown preset '" + preset + "'");

  // Inline coefficient expressions.
  if (!K.has_value())
    throw std::runtime_error("problem.K is required for expression-defined problems");
  const int nn = n, dd = d;
  ProblemSpec spec;
  spec.T = T;
  spec.n = nn;
  spec.d = dd;
  spec.K = *K;
  spec.name = "config";
  auto need = [&](const char* key) -> const std::string& {
    auto it = coefficient_exprs.find(key);
    if (it == coefficient_exprs.end())
      throw std::runtime_error(std::string("problem.") + key + " is required");
    return it->second;
  };
  auto e_b1 = parse_components(need("b1"), params, nn, 1, "b1");
  auto e_b2 = parse_components(need("b2"), params, nn, nn, "b2");
  auto e_f1 = parse_components(need("f1"), params, nn, nn, "f1");
  auto e_f2 = parse_components(need("f2"), params, nn, nn * nn, "f2");
  auto e_b0 = parse_components(need("b0"), params, nn, 1, "b0");
  auto e_f0 = parse_components(need("f0"), params, nn, nn, "f0");
  auto e_sg = parse_components(need("sigma"), params, nn, dd, "sigma");
  auto e_h2 = parse_components(need("h2"), params, nn, nn, "h2");

  // h1 is a constant vector: evaluate the expressions once.
  auto e_h1 = parse_components(need("h1"), params, nn, nn, "h1");
  ExprEnv zero_env;
  zero_env.y = Vec::Zero(nn);
  zero_env.ybar = Vec::Zero(nn);
  spec.h1 = Vec(nn);
  for (int i = 0; i < nn; ++i) spec.h1[i] = e_h1[i].eval(zero_env);

  spec.b1 = [e_b1, nn](double t) {
    ExprEnv env; env.t = t; env.y = Vec::Zero(nn); env.ybar = Vec::Zero(nn);
    return e_b1[0].eval(env);
  };
  auto vec_of_t = [nn](std::vector<CoefficientExpr> es) {
    return [es, nn](double t) {
      ExprEnv env; env.t = t; env.y = Vec::Zero(nn); env.ybar = Vec::Zero(nn);
      Vec v(nn);
      for (int i = 0; i < nn; ++i) v[i] = es[i].eval(env);
      return v;
    };
  };
  spec.b2 = vec_of_t(e_b2);
  spec.f1 = vec_of_t(e_f1);
  spec.f2 = [e_f2, nn](double t) {
    ExprEnv env; env.t = t; env.y = Vec::Zero(nn); env.ybar = Vec::Zero(nn);
    Mat m(nn, nn);
    for (int i = 0; i < nn; ++i)
      for (int j = 0; j < nn; ++j) m(i, j) = e_f2[i * nn + j].eval(env);
    return m;
  };
  spec.b0 = [e_b0, nn](double t, double xbar, const Vec& ybar) {
    ExprEnv env; env.t = t; env.xbar = xbar; env.y = Vec::Zero(nn); env.ybar = ybar;
    return e_b0[0].eval(env);
  };
  spec.f0 = [e_f0, nn](double t, double xbar, const Vec& ybar) {
    ExprEnv env; env.t = t; env.xbar = xbar; env.y = Vec::Zero(nn); env.ybar = ybar;
    Vec v(nn);
    for (int i = 0; i < nn; ++i) v[i] = e_f0[i].eval(env);
    return v;
  };
  spec.sigma = [e_sg, nn, dd](double t, double x, const Vec& y, double xbar,
                              const Vec& ybar) {
    ExprEnv env; env.t = t; env.x = x; env.xbar = xbar; env.y = y; env.ybar = ybar;
    Vec v(dd);
    for (int i = 0; i < dd; ++i) v[i] = e_sg[i].eval(env);
    return v;
  };
  spec.h2 = [e_h2, nn](double xbar) {
    ExprEnv env; env.xbar = xbar; env.y = Vec::Zero(nn); env.ybar = Vec::Zero(nn);
    Vec v(nn);
    for (int i = 0; i < nn; ++i) v[i] = e_h2[i].eval(env);
    return v;
  };
  return spec;
}

}  // namespace mfbsde
