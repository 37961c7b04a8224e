#include "dia/sim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dia/errors.hpp"

namespace dia {

std::string_view to_string(DgpKind k) {
  switch (k) {
    case DgpKind::iv: return "iv";
    case DgpKind::civ: return "civ";
    case DgpKind::misspec: return "misspec";
    case DgpKind::binary_confounded: return "binary_confounded";
  }
  return "?";
}

DgpKind parse_dgp_kind(std::string_view s) {
  if (s == "iv") return DgpKind::iv;
  if (s == "civ") return DgpKind::civ;
  if (s == "misspec") return DgpKind::misspec;
  if (s == "binary_confounded") return DgpKind::binary_confounded;
  throw ConfigError("unknown dgp kind: " + std::string(s));
}

double clip01(double v) { return std::min(std::max(v, 0.0), 1.0); }

DgpConfig DgpConfig::defaults(DgpKind kind) {
  DgpConfig c;
  c.kind = kind;
  switch (kind) {
    case DgpKind::iv:
      c.num_instruments = 10;
      c.theta0 = Vec{{1.0, 2.0}};
      break;
    case DgpKind::civ:
      c.num_instruments = 10;
      c.theta0 = Vec{{1.0}};
      c.covariate_dim = 2;
      break;
    case DgpKind::misspec:
      c.num_instruments = 2;
      c.theta0 = Vec{{0.5}};
      c.sigma_u = 0.1;
      break;
    case DgpKind::binary_confounded:
      c.num_instruments = 2;
      c.theta0 = Vec{{1.0, 2.0}};
      c.gamma = Vec{{0.0, 1.0}};
      break;
  }
  return c;
}

namespace {
int theta_dim(DgpKind k) { return (k == DgpKind::iv || k == DgpKind::binary_confounded) ? 2 : 1; }
}  // namespace

void DgpConfig::validate() const {
  if (num_instruments < 1) throw ConfigError("num_instruments must be >= 1");
  if (theta0.size() != 0 && theta0.size() != theta_dim(kind))
    throw ConfigError("theta0 has length " + std::to_string(theta0.size()) + ", kind " +
                      std::string(to_string(kind)) + " needs " + std::to_string(theta_dim(kind)));
  if (gamma.size() != 0) {
    if (gamma.size() != num_instruments) throw ConfigError("gamma length != num_instruments");
    for (double g : gamma)
      if (!(g >= 0.0 && g <= 1.0)) throw ConfigError("gamma entries must lie in [0,1]");
  }
  for (double s : {sigma_u, sigma0, sigma1, sigma_a, sigma_y})
    if (!(s >= 0.0) || !std::isfinite(s)) throw ConfigError("noise scales must be finite and >= 0");
  if (kind == DgpKind::civ) {
    if (covariate_dim < 2) throw ConfigError("civ needs covariate_dim >= 2");
  } else if (covariate_dim != 0) {
    throw ConfigError("covariate_dim only applies to civ");
  }
  if (kind == DgpKind::binary_confounded && num_instruments != 2)
    throw ConfigError("binary_confounded has exactly two instruments");
  if (eval_size < 1) throw ConfigError("eval_size must be >= 1");
}

Vec default_gamma(int m, Rng& rng) {
  int c = static_cast<int>(std::ceil(0.05 * m));
  std::vector<double> g;
  if (m < 2 * c) {
    const double ends[2] = {0.95, 0.05};
    for (int i = 0; i < m; ++i) g.push_back(ends[i]);
  } else {
    g.assign(c, 0.95);
    g.insert(g.end(), c, 0.05);
    int r = m - 2 * c;
    for (int j = 0; j < r; ++j) g.push_back(0.05 + 0.9 * (j + 1) / (r + 1));
  }
  rng.shuffle(g);
  return Eigen::Map<Vec>(g.data(), static_cast<Eigen::Index>(g.size()));
}

DgpInstance make_dgp(const DgpConfig& config, std::uint64_t seed) {
  DgpConfig cfg = config;
  DgpConfig d = DgpConfig::defaults(cfg.kind);
  if (cfg.theta0.size() == 0) cfg.theta0 = d.theta0;
  if (cfg.kind == DgpKind::civ && cfg.covariate_dim == 0) cfg.covariate_dim = d.covariate_dim;
  cfg.validate();
  Rng root(seed);
  if (cfg.gamma.size() == 0) {
    if (cfg.kind == DgpKind::binary_confounded) {
      cfg.gamma = d.gamma;
    } else {
      Rng g = root.split(1);
      cfg.gamma = default_gamma(cfg.num_instruments, g);
    }
  }
  DgpInstance inst;
  inst.cfg_ = cfg;

  Rng er = root.split(2);
  std::vector<EvalPoint> pts;
  pts.reserve(cfg.eval_size);
  for (int i = 0; i < cfg.eval_size; ++i) {
    Rng r = er.split(static_cast<std::uint64_t>(i));
    EvalPoint p;
    p.x = inst.draw_covariates(r);
    if (cfg.kind == DgpKind::misspec) {
      // treatment marginal under a uniform instrument
      int z = static_cast<int>(r.below(cfg.num_instruments));
      p.a = cfg.gamma[z] + cfg.sigma_u * r.normal() + cfg.sigma_a * r.normal();
    } else {
      p.a = r.bernoulli(0.5) ? 1.0 : 0.0;
    }
    pts.push_back(std::move(p));
  }
  inst.eval_ = EvalSet(std::move(pts));
  return inst;
}

double DgpInstance::true_counterfactual(const Vec& x, double a) const {
  switch (cfg_.kind) {
    case DgpKind::iv:
    case DgpKind::binary_confounded:
      return a * cfg_.theta0[0] + (1.0 - a) * cfg_.theta0[1];
    case DgpKind::civ:
      if (x.size() != cfg_.covariate_dim) throw ConfigError("covariate dimension mismatch");
      return x[1] + a * cfg_.theta0[0];
    case DgpKind::misspec:
      return a * a * cfg_.theta0[0];
  }
  return 0.0;
}

Vec DgpInstance::draw_covariates(Rng& rng) const {
  if (cfg_.kind != DgpKind::civ) return Vec();
  Vec x(cfg_.covariate_dim);
  x[0] = rng.bernoulli(0.5) ? 1.0 : 0.0;
  for (int j = 1; j < cfg_.covariate_dim; ++j) x[j] = rng.normal();
  return x;
}

Sample DgpInstance::draw(const Vec& x, int z, Rng& rng, double* p_out) const {
  if (z < 0 || z >= cfg_.num_instruments) throw ConfigError("instrument out of range");
  // Fixed draw order (U, treatment uniform/noise, outcome noise) keeps
  // streams aligned across policies.
  double u = cfg_.sigma_u * rng.normal();
  double t_uniform = rng.uniform();
  double e1 = rng.normal();
  double e2 = rng.normal();
  Sample s;
  s.x = x;
  s.z = z;
  switch (cfg_.kind) {
    case DgpKind::iv:
    case DgpKind::binary_confounded:
    case DgpKind::civ: {
      double g = cfg_.gamma[z];
      if (cfg_.kind == DgpKind::civ) g = x[0] * g + (1.0 - x[0]) * (1.0 - g);
      double p = clip01(g + u);
      if (p_out) *p_out = p;
      s.a = t_uniform < p ? 1.0 : 0.0;
      double xi = s.a == 1.0 ? cfg_.sigma1 * e1 : cfg_.sigma0 * e1;
      s.y = true_counterfactual(x, s.a) + u + xi;
      break;
    }
    case DgpKind::misspec: {
      if (p_out) *p_out = 0.0;
      s.a = cfg_.gamma[z] + u + cfg_.sigma_a * e1;
      s.y = s.a * s.a * cfg_.theta0[0] + u + cfg_.sigma_y * e2;
      break;
    }
  }
  return s;
}

void sample_batch(const DgpInstance& dgp, const PolicyRegistry& registry, int policy_id, int n,
                  const Rng& rng, Dataset& out, std::vector<double>* p_trace) {
  if (n <= 0) throw ConfigError("sample_batch needs n >= 1");
  const Policy& pol = registry.policy(policy_id);
  if (pol.num_instruments() != dgp.num_instruments() || pol.input_dim() != dgp.covariate_dim())
    throw ConfigError("policy shape does not match the DGP");
  out.reserve(out.size() + n);
  for (int i = 0; i < n; ++i) {
    Rng r = rng.split(static_cast<std::uint64_t>(i));
    Vec x = dgp.draw_covariates(r);
    Vec probs = pol.eval_probs(x);
    int z = r.categorical(std::span<const double>(probs.data(), probs.size()));
    double p = 0.0;
    Sample s = dgp.draw(x, z, r, &p);
    s.policy_id = policy_id;
    s.logged_propensity = probs[z];
    if (p_trace) p_trace->push_back(p);
    out.push_back(std::move(s));
  }
}

Dataset sample_batch(const DgpInstance& dgp, const PolicyRegistry& registry, int policy_id, int n,
                     const Rng& rng) {
  Dataset d;
  sample_batch(dgp, registry, policy_id, n, rng, d);
  return d;
}

double true_mse(const DgpInstance& dgp, const Predictor& f, const EvalSet& eval) {
  if (eval.empty()) throw ConfigError("empty eval set");
  double s = 0.0;
  for (const auto& p : eval.points()) {
    double d = dgp.true_counterfactual(p.x, p.a) - f(p.x, p.a);
    s += d * d;
  }
  return s / static_cast<double>(eval.size());
}

}  // namespace dia
