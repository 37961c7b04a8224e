#include "dia/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <limits>
#include <memory>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include "dia/errors.hpp"

namespace dia {

std::string_view to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::dia_vs_uniform: return "dia_vs_uniform";
    case ExperimentKind::gradient_variance: return "gradient_variance";
    case ExperimentKind::sampler_variance: return "sampler_variance";
    case ExperimentKind::policy_ordering: return "policy_ordering";
    case ExperimentKind::oracle_table: return "oracle_table";
  }
  return "?";
}

ExperimentKind parse_experiment_kind(std::string_view s) {
  for (auto k : {ExperimentKind::dia_vs_uniform, ExperimentKind::gradient_variance,
                 ExperimentKind::sampler_variance, ExperimentKind::policy_ordering,
                 ExperimentKind::oracle_table})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown experiment: " + std::string(s));
}

void ExperimentConfig::validate() const {
  dgp.validate();
  if (trials < 1) throw ConfigError("trials must be >= 1");
  if (K < 1 || batch_n < 1) throw ConfigError("K and batch_n must be >= 1");
  resample.validate();
  optimize.influence.validate();
  if (optimize.steps < 0 || !(optimize.lr > 0.0)) throw ConfigError("invalid optimizer settings");
  const auto& d = diagnostics;
  if (d.replications < 2) throw ConfigError("diagnostics.replications must be >= 2");
  if (!(d.fd_step > 0.0)) throw ConfigError("diagnostics.fd_step must be > 0");
  for (int n : d.sizes)
    if (n < 2) throw ConfigError("diagnostics.sizes entries must be >= 2");
  if (d.behavior.size() && d.behavior.size() != dgp.num_instruments)
    throw ConfigError("diagnostics.behavior length != num_instruments");
  for (const auto& t : d.targets)
    if (t.size() != dgp.num_instruments) throw ConfigError("diagnostics.targets entry length != num_instruments");
}

namespace {

template <class T>
T opt_get(const Json& j, const char* key, T dflt) {
  if (!j.contains(key)) return dflt;
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("field ") + key + ": " + e.what());
  }
}

void check_keys(const Json& j, const std::set<std::string>& allowed, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError(std::string("unknown ") + what + " field: " + it.key());
}

Vec probs_from_json(const Json& j, int m) {
  Vec v = vec_from_json(j);
  if (v.size() != m) throw ConfigError("policy probability vector has wrong length");
  if (v.minCoeff() < 0.0 || std::abs(v.sum() - 1.0) > 1e-9) throw ConfigError("policy probabilities must form a simplex");
  return v;
}

Policy fixed_policy(const Vec& probs, int input_dim) {
  Vec logits(probs.size());
  for (Eigen::Index j = 0; j < probs.size(); ++j)
    logits[j] = probs[j] > 0.0 ? std::log(probs[j]) : -std::numeric_limits<double>::infinity();
  return Policy::softmax(logits, input_dim);
}

}  // namespace

ExperimentConfig experiment_config_from_json(const Json& j) {
  check_keys(j,
             {"experiment", "dgp", "K", "batch_n", "trials", "seed", "resample", "optimizer",
              "estimator", "diagnostics", "output", "warm_start_policy"},
             "config");
  ExperimentConfig c;
  if (j.contains("experiment")) c.experiment = parse_experiment_kind(opt_get<std::string>(j, "experiment", ""));
  if (!j.contains("dgp")) throw ConfigError("config.dgp is required");
  c.dgp = dgp_config_from_json(j["dgp"]);
  c.K = opt_get(j, "K", c.K);
  c.batch_n = opt_get(j, "batch_n", c.batch_n);
  c.trials = opt_get(j, "trials", c.trials);
  c.seed = opt_get<std::uint64_t>(j, "seed", c.seed);
  c.warm_start_policy = opt_get(j, "warm_start_policy", c.warm_start_policy);
  if (j.contains("resample")) c.resample = resample_config_from_json(j["resample"]);
  if (j.contains("optimizer")) {
    const Json& o = j["optimizer"];
    check_keys(o, {"steps", "lr", "grad_tol", "patience", "k_floor", "k_retries", "influence_order", "cg_tol"},
               "optimizer");
    c.optimize.steps = opt_get(o, "steps", c.optimize.steps);
    c.optimize.lr = opt_get(o, "lr", c.optimize.lr);
    c.optimize.grad_tol = opt_get(o, "grad_tol", c.optimize.grad_tol);
    c.optimize.patience = opt_get(o, "patience", c.optimize.patience);
    c.optimize.k_floor = opt_get(o, "k_floor", c.optimize.k_floor);
    c.optimize.k_retries = opt_get(o, "k_retries", c.optimize.k_retries);
    c.optimize.influence.order = opt_get(o, "influence_order", c.optimize.influence.order);
    c.optimize.influence.cg_tol = opt_get(o, "cg_tol", c.optimize.influence.cg_tol);
  }
  c.optimize.resample = c.resample;
  if (j.contains("estimator")) {
    check_keys(j["estimator"], {"family", "encoding", "basis", "index_offset", "ridge", "hidden"}, "estimator");
    c.estimator = j["estimator"];
  }
  if (j.contains("diagnostics")) {
    const Json& d = j["diagnostics"];
    check_keys(d,
               {"sizes", "replications", "fd_step", "grad_component", "n", "subset_sizes", "alphas",
                "behavior", "targets", "mse_target", "grid_step", "mc_trials", "n_per_trial",
                "max_grid_points"},
               "diagnostics");
    auto& g = c.diagnostics;
    g.sizes = opt_get(d, "sizes", g.sizes);
    g.replications = opt_get(d, "replications", g.replications);
    g.fd_step = opt_get(d, "fd_step", g.fd_step);
    g.grad_component = opt_get(d, "grad_component", g.grad_component);
    g.n = opt_get(d, "n", g.n);
    g.subset_sizes = opt_get(d, "subset_sizes", g.subset_sizes);
    g.alphas = opt_get(d, "alphas", g.alphas);
    if (d.contains("behavior")) g.behavior = probs_from_json(d["behavior"], c.dgp.num_instruments);
    if (d.contains("targets")) {
      g.targets.clear();
      for (const auto& t : d["targets"]) g.targets.push_back(probs_from_json(t, c.dgp.num_instruments));
    }
    if (d.contains("mse_target")) {
      auto s = opt_get<std::string>(d, "mse_target", "proxy");
      if (s == "proxy") g.mse_target = MseTarget::proxy;
      else if (s == "truth") g.mse_target = MseTarget::truth;
      else throw ConfigError("unknown mse_target: " + s);
    }
    g.oracle.grid_step = opt_get(d, "grid_step", g.oracle.grid_step);
    g.oracle.mc_trials = opt_get(d, "mc_trials", g.oracle.mc_trials);
    g.oracle.n_per_trial = opt_get(d, "n_per_trial", g.oracle.n_per_trial);
    g.oracle.max_grid_points = opt_get(d, "max_grid_points", g.oracle.max_grid_points);
  }
  c.output = opt_get<std::string>(j, "output", c.output);
  c.validate();
  return c;
}

Json experiment_config_to_json(const ExperimentConfig& c) {
  const auto& d = c.diagnostics;
  Json targets = Json::array();
  for (const auto& t : d.targets) targets.push_back(vec_to_json(t));
  Json diag{{"sizes", d.sizes},
            {"replications", d.replications},
            {"fd_step", d.fd_step},
            {"grad_component", d.grad_component},
            {"n", d.n},
            {"subset_sizes", d.subset_sizes},
            {"alphas", d.alphas},
            {"targets", targets},
            {"mse_target", d.mse_target == MseTarget::proxy ? "proxy" : "truth"},
            {"grid_step", d.oracle.grid_step},
            {"mc_trials", d.oracle.mc_trials},
            {"n_per_trial", d.oracle.n_per_trial},
            {"max_grid_points", d.oracle.max_grid_points}};
  if (d.behavior.size()) diag["behavior"] = vec_to_json(d.behavior);
  Json j{{"experiment", std::string(to_string(c.experiment))},
         {"dgp", dgp_config_to_json(c.dgp)},
         {"K", c.K},
         {"batch_n", c.batch_n},
         {"trials", c.trials},
         {"seed", c.seed},
         {"warm_start_policy", c.warm_start_policy},
         {"resample", resample_config_to_json(c.resample)},
         {"optimizer",
          {{"steps", c.optimize.steps},
           {"lr", c.optimize.lr},
           {"grad_tol", c.optimize.grad_tol},
           {"patience", c.optimize.patience},
           {"k_floor", c.optimize.k_floor},
           {"k_retries", c.optimize.k_retries},
           {"influence_order", c.optimize.influence.order},
           {"cg_tol", c.optimize.influence.cg_tol}}},
         {"diagnostics", diag},
         {"output", c.output}};
  if (!c.estimator.is_null()) j["estimator"] = c.estimator;
  return j;
}

EstimatorSpec resolve_estimator(const Json& o, const DgpInstance& dgp) {
  EstimatorSpec s = default_estimator(dgp);
  if (o.is_null()) return s;
  if (o.contains("family")) s.family = parse_estimator_family(o["family"].get<std::string>());
  if (o.contains("encoding")) s.tsls.encoding = parse_instrument_encoding(o["encoding"].get<std::string>());
  if (o.contains("basis")) s.tsls.basis = parse_outcome_basis(o["basis"].get<std::string>());
  if (o.contains("index_offset")) s.tsls.index_offset = o["index_offset"].get<double>();
  if (o.contains("ridge")) {
    s.logistic.ridge = o["ridge"].get<double>();
    s.neural.ridge = s.logistic.ridge;
  }
  if (o.contains("hidden")) s.neural.hidden = o["hidden"].get<int>();
  s.tsls.num_instruments = dgp.num_instruments();
  s.logistic.num_instruments = dgp.num_instruments();
  s.neural.num_instruments = dgp.num_instruments();
  s.neural.covariate_dim = dgp.covariate_dim();
  return s;
}

void parallel_for(int n, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* e = std::getenv("DIA_THREADS")) hw = static_cast<unsigned>(std::max(1, std::atoi(e)));
  unsigned workers = std::min<unsigned>(hw, static_cast<unsigned>(n));
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex mu;
  auto work = [&] {
    for (;;) {
      int i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(mu);
        if (!err) err = std::current_exception();
        next.store(n);
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < workers; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

MomentStats moment_stats(const std::vector<double>& v) {
  MomentStats s;
  s.count = static_cast<int>(v.size());
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / s.count;
  if (s.count > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.variance = ss / (s.count - 1);
  }
  s.stderr_ = std::sqrt(s.variance / s.count);
  return s;
}

PairedSummary paired_summary(const std::vector<double>& dia, const std::vector<double>& uniform) {
  if (dia.size() != uniform.size()) throw std::invalid_argument("paired arms differ in length");
  PairedSummary p;
  p.trials = static_cast<int>(dia.size());
  std::vector<double> ratio, diff;
  for (std::size_t i = 0; i < dia.size(); ++i) {
    ratio.push_back(dia[i] / uniform[i]);
    diff.push_back(uniform[i] - dia[i]);
  }
  auto r = moment_stats(ratio);
  auto d = moment_stats(diff);
  p.mean_ratio = r.mean;
  p.ratio_stderr = r.stderr_;
  p.mean_diff = d.mean;
  p.diff_stderr = d.stderr_;
  p.ratio_of_means = moment_stats(dia).mean / moment_stats(uniform).mean;
  return p;
}

DiaVsUniformResult run_dia_vs_uniform(const ExperimentConfig& cfg) {
  struct Trial {
    AllocationTrace dia, uni;
  };
  std::vector<Trial> trials(cfg.trials);
  Rng root(cfg.seed);
  parallel_for(cfg.trials, [&](int t) {
    Rng tr = root.split(static_cast<std::uint64_t>(t));
    Rng seeder = tr.split(0);
    DgpInstance dgp = make_dgp(cfg.dgp, seeder.next_u64());
    DiaOptions o;
    o.K = cfg.K;
    o.batch_n = cfg.batch_n;
    o.estimator = resolve_estimator(cfg.estimator, dgp);
    o.optimize = cfg.optimize;
    o.optimize.resample = cfg.resample;
    o.warm_start_policy = cfg.warm_start_policy;
    trials[t].dia = run_dia(dgp, o, tr.split(1));
    trials[t].uni = run_uniform(dgp, o, tr.split(1));
  });
  DiaVsUniformResult res;
  res.trace.header = {"trial", "allocation", "samples", "mse_dia", "mse_uniform", "ratio",
                      "accepted_N'", "k_used", "grad_steps"};
  for (int t = 0; t < cfg.trials; ++t) {
    const auto& a = trials[t].dia.records;
    const auto& b = trials[t].uni.records;
    for (std::size_t j = 0; j < a.size(); ++j) {
      res.trace.rows.push_back({std::to_string(t), std::to_string(a[j].allocation), std::to_string(a[j].samples),
                                format_double(a[j].mse), format_double(b[j].mse),
                                format_double(a[j].mse / b[j].mse), std::to_string(a[j].accepted),
                                std::to_string(a[j].k_used), std::to_string(a[j].grad_steps)});
    }
    res.final_dia.push_back(a.back().mse);
    res.final_uniform.push_back(b.back().mse);
  }
  res.summary = paired_summary(res.final_dia, res.final_uniform);
  return res;
}

const GradientVarianceRow& GradientVarianceResult::row(int n, const std::string& estimator) const {
  for (const auto& r : rows)
    if (r.n == n && r.estimator == estimator) return r;
  throw std::out_of_range("no gradient row for n=" + std::to_string(n) + " " + estimator);
}

GradientVarianceResult run_gradient_variance(const ExperimentConfig& cfg) {
  const auto& d = cfg.diagnostics;
  DgpInstance dgp = make_dgp(cfg.dgp, cfg.seed);
  EstimatorSpec spec = resolve_estimator(cfg.estimator, dgp);
  if (!spec.closed_form()) throw ConfigError("gradient_variance needs a closed-form estimator for exact LOO");
  const int m = dgp.num_instruments();
  if (dgp.covariate_dim() != 0) throw ConfigError("gradient_variance needs an unconditional domain");
  if (d.grad_component < 0 || d.grad_component >= m) throw ConfigError("grad_component out of range");
  Vec w0 = Vec::Zero(m);
  if (d.behavior.size()) w0 = d.behavior.array().log().matrix();
  Policy pol = Policy::softmax(w0);
  Vec wp = w0, wm = w0;
  wp[d.grad_component] += d.fd_step;
  wm[d.grad_component] -= d.fd_step;
  PolicyRegistry reg, reg_p, reg_m;
  int id = reg.add(pol, 1);
  int idp = reg_p.add(Policy::softmax(wp), 1);
  int idm = reg_m.add(Policy::softmax(wm), 1);
  auto model = spec.make_model();
  PredictionMse truth = PredictionMse::truth(dgp, model, dgp.eval_set());
  Rng root = Rng(cfg.seed).split(0x67726164);
  const int c = d.grad_component;

  GradientVarianceResult res;
  for (int n : d.sizes) {
    const int R = d.replications;
    std::vector<double> naive(R), cv(R), inf(R), fd(R);
    Rng nr = root.split(static_cast<std::uint64_t>(n));
    parallel_for(R, [&](int r) {
      Rng rr = nr.split(static_cast<std::uint64_t>(r));
      Dataset data = sample_batch(dgp, reg, id, n, rr);
      EstimatorState st = fit_estimator(spec, data);
      double mse = truth.value(st.theta);
      naive[r] = grad_naive(data, pol, mse).gradient[c];
      auto loo = exact_loo_mses(data, spec.tsls, truth);
      for (double& v : loo)
        if (!std::isfinite(v)) v = mse;  // singular refit: no contribution
      cv[r] = grad_cv(data, pol, mse, loo).gradient[c];
      InfluenceReport rep = influence_all(st, data, truth, cfg.optimize.influence);
      std::vector<std::vector<Sample>> subs{data};
      inf[r] = grad_if(subs, pol, {rep}).gradient[c];
      // common random numbers: same stream at w +/- h
      Dataset dp = sample_batch(dgp, reg_p, idp, n, rr);
      Dataset dm = sample_batch(dgp, reg_m, idm, n, rr);
      double fp = truth.value(fit_estimator(spec, dp).theta);
      double fm = truth.value(fit_estimator(spec, dm).theta);
      fd[r] = (fp - fm) / (2.0 * d.fd_step);
    });
    MomentStats fds = moment_stats(fd);
    res.rows.push_back({n, "naive", moment_stats(naive), fds});
    res.rows.push_back({n, "cv", moment_stats(cv), fds});
    res.rows.push_back({n, "if", moment_stats(inf), fds});
    res.rows.push_back({n, "fd", fds, fds});
  }
  res.table.header = {"n", "estimator", "mean", "variance", "stderr", "fd_mean", "fd_stderr", "z"};
  for (const auto& r : res.rows) {
    double z = (r.stats.mean - r.fd.mean) / std::sqrt(r.stats.stderr_ * r.stats.stderr_ + r.fd.stderr_ * r.fd.stderr_);
    if (r.estimator == "fd") z = 0.0;
    res.table.rows.push_back({std::to_string(r.n), r.estimator, format_double(r.stats.mean),
                              format_double(r.stats.variance), format_double(r.stats.stderr_),
                              format_double(r.fd.mean), format_double(r.fd.stderr_), format_double(z)});
  }
  return res;
}

namespace {

struct FixedSetup {
  DgpInstance dgp;
  EstimatorSpec spec;
  Policy behavior;
  PolicyRegistry reg;
  int id = 0;
};

FixedSetup fixed_setup(const ExperimentConfig& cfg) {
  DgpInstance dgp = make_dgp(cfg.dgp, cfg.seed);
  if (dgp.covariate_dim() != 0) throw ConfigError("this diagnostic needs an unconditional domain");
  const int m = dgp.num_instruments();
  Vec b = cfg.diagnostics.behavior.size() ? cfg.diagnostics.behavior : Vec::Constant(m, 1.0 / m);
  FixedSetup s{dgp, resolve_estimator(cfg.estimator, dgp), fixed_policy(b, 0), {}, 0};
  s.id = s.reg.add(s.behavior, cfg.diagnostics.n);
  return s;
}

}  // namespace

SamplerVarianceResult run_sampler_variance(const ExperimentConfig& cfg) {
  const auto& d = cfg.diagnostics;
  if (d.targets.size() != 1) throw ConfigError("sampler_variance needs exactly one target policy");
  FixedSetup s = fixed_setup(cfg);
  Policy target = fixed_policy(d.targets[0], 0);
  auto model = s.spec.make_model();
  PredictionMse truth = PredictionMse::truth(s.dgp, model, s.dgp.eval_set());
  SubsetValue truth_value = [&](std::span<const Sample> sub) { return truth.value(fit_estimator(s.spec, sub).theta); };
  Rng root = Rng(cfg.seed).split(0x73616d70);
  SamplerVarianceResult res;
  for (long k : d.subset_sizes) {
    const int R = d.replications;
    std::vector<double> rs(R, std::numeric_limits<double>::quiet_NaN()), is(R);
    std::vector<int> rs_fail(R, 0), is_over(R, 0);
    Rng kr = root.split(static_cast<std::uint64_t>(k));
    ResampleConfig rc = cfg.resample;
    rc.subset_size_override = k;
    parallel_for(R, [&](int r) {
      Rng rr = kr.split(static_cast<std::uint64_t>(r));
      Dataset data = sample_batch(s.dgp, s.reg, s.id, d.n, rr.split(0));
      Rng a = rr.split(1), b = rr.split(2);
      SubsetValue value = truth_value;
      if (d.mse_target == MseTarget::proxy) {
        auto proxy = std::make_shared<PredictionMse>(PredictionMse::proxy(fit_estimator(s.spec, data), s.dgp.eval_set()));
        value = [&, proxy](std::span<const Sample> sub) { return proxy->value(fit_estimator(s.spec, sub).theta); };
      }
      try {
        rs[r] = rs_estimate(data, target, s.reg, value, rc, a).value;
      } catch (const AcceptanceError&) {
        rs_fail[r] = 1;
      }
      MseEstimate e = is_estimate(data, target, value, rc, b);
      is[r] = e.value;
      is_over[r] = e.overflow ? 1 : 0;
    });
    SamplerVarianceRow row;
    row.k = k;
    std::vector<double> rs_ok;
    for (double v : rs)
      if (std::isfinite(v)) rs_ok.push_back(v);
    row.rs = moment_stats(rs_ok);
    row.is = moment_stats(is);
    row.rs_failures = std::accumulate(rs_fail.begin(), rs_fail.end(), 0);
    row.is_overflows = std::accumulate(is_over.begin(), is_over.end(), 0);
    res.rows.push_back(row);
  }
  res.table.header = {"k", "rs_mean", "rs_variance", "is_mean", "is_variance", "variance_gap", "variance_ratio",
                      "rs_failures", "is_overflows"};
  for (const auto& r : res.rows)
    res.table.rows.push_back({std::to_string(r.k), format_double(r.rs.mean), format_double(r.rs.variance),
                              format_double(r.is.mean), format_double(r.is.variance),
                              format_double(r.is.variance - r.rs.variance),
                              format_double(r.is.variance / r.rs.variance), std::to_string(r.rs_failures),
                              std::to_string(r.is_overflows)});
  return res;
}

PolicyOrderingResult run_policy_ordering(const ExperimentConfig& cfg) {
  const auto& d = cfg.diagnostics;
  if (d.targets.size() < 2) throw ConfigError("policy_ordering needs at least two target policies");
  if (d.alphas.empty()) throw ConfigError("policy_ordering needs alphas");
  FixedSetup s = fixed_setup(cfg);
  std::vector<Policy> targets;
  for (const auto& t : d.targets) targets.push_back(fixed_policy(t, 0));
  auto model = s.spec.make_model();
  PredictionMse truth = PredictionMse::truth(s.dgp, model, s.dgp.eval_set());
  EstimatorFit fit = [&](std::span<const Sample> sub) { return fit_estimator(s.spec, sub); };
  const int P = static_cast<int>(targets.size());
  const int A = static_cast<int>(d.alphas.size());
  const int S = cfg.trials;
  // est[seed][alpha][policy]
  std::vector<std::vector<std::vector<double>>> est(S, std::vector<std::vector<double>>(A, std::vector<double>(P)));
  Rng root = Rng(cfg.seed).split(0x6f726465);
  parallel_for(S, [&](int sd) {
    Rng sr = root.split(static_cast<std::uint64_t>(sd));
    Dataset data = sample_batch(s.dgp, s.reg, s.id, d.n, sr.split(0));
    EstimatorState ref = fit_estimator(s.spec, data);
    for (int a = 0; a < A; ++a) {
      ResampleConfig rc = cfg.resample;
      rc.alpha = d.alphas[a];
      rc.subset_size_override = 0;
      for (int p = 0; p < P; ++p) {
        Rng pr = sr.split(1 + static_cast<std::uint64_t>(a));  // shared across policies
        try {
          if (d.mse_target == MseTarget::proxy) {
            est[sd][a][p] = rs_mse_estimate(data, targets[p], s.reg, fit, ref, s.dgp.eval_set(), rc, pr).value;
          } else {
            SubsetValue v = [&](std::span<const Sample> sub) { return truth.value(fit(sub).theta); };
            est[sd][a][p] = rs_estimate(data, targets[p], s.reg, v, rc, pr).value;
          }
        } catch (const AcceptanceError&) {
          est[sd][a][p] = std::numeric_limits<double>::quiet_NaN();
        }
      }
    }
  });
  PolicyOrderingResult res;
  res.seeds = S;
  res.table.header = {"seed", "alpha", "policy"};
  for (int j = 0; j < s.dgp.num_instruments(); ++j) res.table.header.push_back("p" + std::to_string(j));
  for (const char* h : {"estimate", "rank", "consistent"}) res.table.header.push_back(h);
  for (int sd = 0; sd < S; ++sd) {
    std::vector<std::vector<int>> ranks(A, std::vector<int>(P));
    bool failed = false;
    for (int a = 0; a < A; ++a) {
      std::vector<int> order(P);
      std::iota(order.begin(), order.end(), 0);
      for (int p = 0; p < P; ++p) failed |= !std::isfinite(est[sd][a][p]);
      std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return est[sd][a][x] < est[sd][a][y]; });
      for (int r = 0; r < P; ++r) ranks[a][order[r]] = r;
    }
    bool same = !failed;
    for (int a = 1; a < A && same; ++a) same = ranks[a] == ranks[0];
    res.failures += failed ? 1 : 0;
    res.consistent += same ? 1 : 0;
    for (int a = 0; a < A; ++a)
      for (int p = 0; p < P; ++p) {
        std::vector<std::string> row{std::to_string(sd), format_double(d.alphas[a]), std::to_string(p)};
        for (Eigen::Index j = 0; j < d.targets[p].size(); ++j) row.push_back(format_double(d.targets[p][j]));
        row.push_back(format_double(est[sd][a][p]));
        row.push_back(std::to_string(ranks[a][p]));
        row.push_back(same ? "1" : "0");
        res.table.rows.push_back(std::move(row));
      }
  }
  return res;
}

CsvTable oracle_table_csv(const BruteForceResult& r, int m) {
  CsvTable t;
  for (int j = 0; j < m; ++j) t.header.push_back("p" + std::to_string(j));
  t.header.push_back("mean_mse");
  t.header.push_back("stderr");
  for (const auto& row : r.table) {
    std::vector<std::string> cells;
    for (Eigen::Index j = 0; j < row.probs.size(); ++j) cells.push_back(format_double(row.probs[j]));
    cells.push_back(format_double(row.mean_mse));
    cells.push_back(format_double(row.stderr_));
    t.rows.push_back(std::move(cells));
  }
  return t;
}

BruteForceResult run_oracle_table(const ExperimentConfig& cfg) {
  DgpInstance dgp = make_dgp(cfg.dgp, cfg.seed);
  BruteForceOptions o = cfg.diagnostics.oracle;
  o.seed = cfg.seed;
  return brute_force_policy(dgp, resolve_estimator(cfg.estimator, dgp), o);
}

std::vector<std::filesystem::path> run_experiment(const ExperimentConfig& cfg,
                                                  const std::filesystem::path& out_dir) {
  cfg.validate();
  Json cj = experiment_config_to_json(cfg);
  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::string& name, const CsvTable& t) {
    auto p = out_dir / name;
    write_csv(p, t);
    write_sidecar(p, cj, t.rows.size());
    written.push_back(p);
  };
  auto summary_table = [](std::vector<std::pair<std::string, double>> kv) {
    CsvTable t;
    t.header = {"metric", "value"};
    for (auto& [k, v] : kv) t.rows.push_back({k, format_double(v)});
    return t;
  };
  switch (cfg.experiment) {
    case ExperimentKind::dia_vs_uniform: {
      auto r = run_dia_vs_uniform(cfg);
      emit("trace.csv", r.trace);
      const auto& s = r.summary;
      emit("summary.csv", summary_table({{"trials", s.trials},
                                         {"mean_final_ratio", s.mean_ratio},
                                         {"ratio_stderr", s.ratio_stderr},
                                         {"ratio_of_means", s.ratio_of_means},
                                         {"mean_paired_diff", s.mean_diff},
                                         {"paired_stderr", s.diff_stderr}}));
      break;
    }
    case ExperimentKind::gradient_variance:
      emit("gradient_variance.csv", run_gradient_variance(cfg).table);
      break;
    case ExperimentKind::sampler_variance:
      emit("sampler_variance.csv", run_sampler_variance(cfg).table);
      break;
    case ExperimentKind::policy_ordering: {
      auto r = run_policy_ordering(cfg);
      emit("policy_ordering.csv", r.table);
      emit("policy_ordering_summary.csv",
           summary_table({{"seeds", r.seeds}, {"consistent", r.consistent}, {"failures", r.failures},
                          {"fraction", r.fraction()}}));
      break;
    }
    case ExperimentKind::oracle_table: {
      auto r = run_oracle_table(cfg);
      emit("oracle_table.csv", oracle_table_csv(r, cfg.dgp.num_instruments));
      break;
    }
  }
  return written;
}

}  // namespace dia
