#include "dia/engine.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "dia/errors.hpp"

namespace dia {

std::string_view to_string(GradientKind k) {
  switch (k) {
    case GradientKind::naive: return "naive";
    case GradientKind::cv: return "cv";
    case GradientKind::influence: return "if";
  }
  return "?";
}

namespace {

void check_finite(const Vec& g) {
  if (!g.allFinite()) throw NonFiniteError("non-finite policy gradient");
}

}  // namespace

void adam_step(AdamState& st, Vec& weights, const Vec& grad) {
  if (grad.size() != weights.size()) throw ConfigError("gradient/weight shape mismatch");
  check_finite(grad);
  if (st.m.size() != weights.size()) {
    st.m = Vec::Zero(weights.size());
    st.v = Vec::Zero(weights.size());
    st.t = 0;
  }
  ++st.t;
  st.m = st.beta1 * st.m + (1.0 - st.beta1) * grad;
  st.v = st.beta2 * st.v + (1.0 - st.beta2) * grad.cwiseProduct(grad);
  double c1 = 1.0 - std::pow(st.beta1, st.t);
  double c2 = 1.0 - std::pow(st.beta2, st.t);
  for (Eigen::Index i = 0; i < weights.size(); ++i)
    weights[i] -= st.lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + st.eps);
}

GradientEstimate grad_naive(std::span<const Sample> data, const Policy& policy, double mse_value) {
  GradientEstimate g;
  g.kind = GradientKind::naive;
  g.gradient = Vec::Zero(policy.weights().size());
  g.weights = Vec::Constant(static_cast<Eigen::Index>(data.size()), mse_value);
  if (mse_value == 0.0) return g;
  for (const auto& s : data) g.gradient += policy.log_prob_grad(s.x, s.z);
  g.gradient *= mse_value;
  check_finite(g.gradient);
  return g;
}

GradientEstimate grad_cv(std::span<const Sample> data, const Policy& policy, double full_mse,
                         std::span<const double> loo_mses) {
  if (loo_mses.size() != data.size()) throw ConfigError("loo_mses length != dataset length");
  GradientEstimate g;
  g.kind = GradientKind::cv;
  g.gradient = Vec::Zero(policy.weights().size());
  g.weights.resize(static_cast<Eigen::Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    double d = full_mse - loo_mses[i];
    g.weights[i] = d;
    if (d != 0.0) g.gradient += d * policy.log_prob_grad(data[i].x, data[i].z);
  }
  check_finite(g.gradient);
  return g;
}

GradientEstimate grad_if(const std::vector<std::vector<Sample>>& subsets, const Policy& eff_policy,
                         const std::vector<InfluenceReport>& reports) {
  if (subsets.size() != reports.size()) throw ConfigError("one influence report per subset");
  GradientEstimate g;
  g.kind = GradientKind::influence;
  g.gradient = Vec::Zero(eff_policy.weights().size());
  if (subsets.empty()) return g;
  std::size_t total = 0;
  for (const auto& s : subsets) total += s.size();
  g.weights.resize(static_cast<Eigen::Index>(total));
  Eigen::Index o = 0;
  for (std::size_t b = 0; b < subsets.size(); ++b) {
    const auto& sub = subsets[b];
    const auto& rep = reports[b];
    if (static_cast<std::size_t>(rep.loo_delta.size()) != sub.size())
      throw ConfigError("influence report misaligned with subset");
    for (std::size_t i = 0; i < sub.size(); ++i) {
      double w = rep.loo_delta[static_cast<Eigen::Index>(i)];
      g.weights[o++] = w;
      if (w != 0.0) g.gradient += w * eff_policy.log_prob_grad(sub[i].x, sub[i].z);
    }
  }
  g.gradient /= static_cast<double>(subsets.size());
  check_finite(g.gradient);
  return g;
}

std::vector<double> exact_loo_mses(std::span<const Sample> data, const TwoStageLsConfig& cfg,
                                   const MseFunctional& mse) {
  Mat loo = loo_thetas_2sls(data, cfg);
  std::vector<double> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    Vec th = loo.row(static_cast<Eigen::Index>(i)).transpose();
    out[i] = th.allFinite() ? mse.value(th) : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

OptimizeResult optimize_policy(std::span<const Sample> data, const PolicyRegistry& registry,
                               const EvalSet& eval, long budget_N, const Policy& init,
                               const EstimatorSpec& estimator, const OptimizeOptions& opts,
                               const Rng& rng) {
  const long n = static_cast<long>(data.size());
  if (n == 0) throw ConfigError("optimize_policy on empty dataset");
  if (budget_N < n) throw ConfigError("budget_N smaller than the collected dataset");
  if (registry.total_count() != n) throw ConfigError("registry counts do not match dataset");
  opts.resample.validate();
  opts.influence.validate();

  EstimatorState reference = fit_estimator(estimator, data);
  PredictionMse proxy = PredictionMse::proxy(reference, eval);

  OptimizeResult res;
  Policy learn = init;
  AdamState adam;
  adam.lr = opts.lr;
  Vec w = learn.weights();
  std::vector<EstimatorState> warm(opts.resample.B);
  std::vector<bool> have_warm(opts.resample.B, false);
  int quiet = 0;
  const long k0 = opts.resample.subset_size(n);

  for (int step = 0; step < opts.steps; ++step) {
    Rng step_rng = rng.split(static_cast<std::uint64_t>(step));
    learn = learn.with_weights(w);
    Policy eff = effective_policy(registry, learn, n, budget_N);

    AcceptanceResult acc = multi_rejection_filter(data, eff, registry, opts.resample, step_rng);
    long k = k0;
    long N = static_cast<long>(acc.accepted.size());
    for (int r = 0; r < opts.k_retries && N < k; ++r) {
      long shrunk = std::max(k / 2, std::min(opts.k_floor, k));
      if (shrunk == k) break;
      k = shrunk;
      ++res.k_shrinks;
    }
    if (N < k) throw AcceptanceError(N, k);
    res.k_used = k;
    res.accepted = N;
    res.rho_max = acc.rho_max;

    auto idx = draw_subsets(acc.accepted, k, opts.resample.B, step_rng);
    std::vector<std::vector<Sample>> subsets;
    std::vector<InfluenceReport> reports;
    double obj = 0.0;
    for (int b = 0; b < opts.resample.B; ++b) {
      auto sub = gather(data, idx[b]);
      try {
        EstimatorState st = fit_estimator(estimator, sub, have_warm[b] ? &warm[b] : nullptr);
        InfluenceReport rep = influence_all(st, sub, proxy, opts.influence);
        obj += proxy.value(st.theta);
        warm[b] = std::move(st);
        have_warm[b] = true;
        subsets.push_back(std::move(sub));
        reports.push_back(std::move(rep));
      } catch (const RankDeficientError&) {
        ++res.fit_failures;
      } catch (const ConvergenceError&) {
        ++res.fit_failures;
      }
    }
    res.objective.push_back(subsets.empty() ? std::numeric_limits<double>::quiet_NaN()
                                            : obj / static_cast<double>(subsets.size()));
    Vec g = grad_if(subsets, eff, reports).gradient;
    adam_step(adam, w, g);
    res.steps = step + 1;
    double gn = g.size() ? g.cwiseAbs().maxCoeff() : 0.0;
    quiet = gn < opts.grad_tol ? quiet + 1 : 0;
    if (quiet >= opts.patience) break;
  }
  res.policy = learn.with_weights(w);
  return res;
}

Policy initial_learnable_policy(const DgpInstance& dgp, const Rng& rng) {
  if (dgp.covariate_dim() == 0) return Policy::uniform(dgp.num_instruments());
  Rng r = rng.split(0x706f6c);
  return Policy::mlp(dgp.covariate_dim(), dgp.num_instruments(), r);
}

namespace {

AllocationTrace run_arm(const DgpInstance& dgp, const DiaOptions& opts, const Rng& rng, bool adaptive) {
  if (opts.K < 1 || opts.batch_n < 1) throw ConfigError("K and batch_n must be >= 1");
  AllocationTrace tr;
  const long N = static_cast<long>(opts.K) * opts.batch_n;
  Rng data_rng = rng.split(0);
  Rng opt_rng = rng.split(1);
  Policy uniform = Policy::uniform(dgp.num_instruments(), dgp.covariate_dim());
  Policy learn = initial_learnable_policy(dgp, rng);
  Policy next = uniform;
  const EstimatorState* warm = nullptr;
  for (int j = 0; j < opts.K; ++j) {
    AllocationRecord rec;
    rec.allocation = j + 1;
    if (adaptive && j > 0) {
      Policy start = opts.warm_start_policy ? learn : initial_learnable_policy(dgp, rng);
      OptimizeResult o = optimize_policy(tr.data, tr.registry, dgp.eval_set(), N, start,
                                         opts.estimator, opts.optimize,
                                         opt_rng.split(static_cast<std::uint64_t>(j)));
      learn = o.policy;
      next = o.policy;
      rec.accepted = o.accepted;
      rec.k_used = o.k_used;
      rec.grad_steps = o.steps;
      rec.rho_max = o.rho_max;
    }
    int id = tr.registry.add(next, opts.batch_n);
    sample_batch(dgp, tr.registry, id, opts.batch_n, data_rng.split(static_cast<std::uint64_t>(j)),
                 tr.data);
    tr.final_state = fit_estimator(opts.estimator, tr.data, warm);
    warm = &tr.final_state;
    rec.samples = static_cast<long>(tr.data.size());
    rec.mse = true_mse(dgp, tr.final_state, dgp.eval_set());
    rec.policy = next;
    tr.records.push_back(std::move(rec));
  }
  return tr;
}

}  // namespace

AllocationTrace run_dia(const DgpInstance& dgp, const DiaOptions& opts, const Rng& rng) {
  return run_arm(dgp, opts, rng, true);
}

AllocationTrace run_uniform(const DgpInstance& dgp, const DiaOptions& opts, const Rng& rng) {
  return run_arm(dgp, opts, rng, false);
}

}  // namespace dia
