#include "dia/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "dia/errors.hpp"

namespace dia {

long ResampleConfig::subset_size(long n) const {
  if (subset_size_override > 0) return subset_size_override;
  return static_cast<long>(std::ceil(std::pow(static_cast<double>(n), alpha) - 1e-9));
}

void ResampleConfig::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0,1)");
  if (B < 1) throw ConfigError("B must be >= 1");
  if (subset_size_override < 0) throw ConfigError("negative subset size");
}

double multi_importance_ratio(const Sample& s, const Policy& target, const PolicyRegistry& registry) {
  double num = target.prob(s.x, s.z);
  if (num == 0.0) return 0.0;
  double den = registry.average_propensity(s.x, s.z);
  if (!(den > 0.0))
    throw SupportError("target puts mass on instrument " + std::to_string(s.z) +
                       " outside the union of past supports");
  return num / den;
}

std::vector<double> multi_importance_ratios(std::span<const Sample> data, const Policy& target,
                                            const PolicyRegistry& registry) {
  std::vector<double> r;
  r.reserve(data.size());
  if (target.input_dim() == 0) {
    // unconditional: one table lookup per sample
    Vec empty;
    Vec num = target.eval_probs(empty);
    Vec den = registry.average_probs(empty);
    for (const auto& s : data) {
      if (s.z < 0 || s.z >= num.size()) throw ConfigError("instrument out of range");
      if (num[s.z] == 0.0) {
        r.push_back(0.0);
        continue;
      }
      if (!(den[s.z] > 0.0))
        throw SupportError("target puts mass on instrument " + std::to_string(s.z) +
                           " outside the union of past supports");
      r.push_back(num[s.z] / den[s.z]);
    }
    return r;
  }
  for (const auto& s : data) r.push_back(multi_importance_ratio(s, target, registry));
  return r;
}

std::optional<double> exact_rho_max(const Policy& target, const PolicyRegistry& registry) {
  if (target.input_dim() != 0) return std::nullopt;
  Vec empty;
  Vec num = target.eval_probs(empty);
  Vec den = registry.average_probs(empty);
  double mx = 0.0;
  for (Eigen::Index z = 0; z < num.size(); ++z) {
    if (num[z] == 0.0) continue;
    if (!(den[z] > 0.0)) throw SupportError("target outside the union of past supports");
    mx = std::max(mx, num[z] / den[z]);
  }
  return mx;
}

AcceptanceResult accept_by_ratios(std::vector<double> ratios, double rho_max, long k, Rng& rng) {
  AcceptanceResult res;
  res.k = k;
  res.rho_max = rho_max;
  for (std::size_t i = 0; i < ratios.size(); ++i) {
    double u = rng.uniform();
    if (ratios[i] < 0.0) throw ConfigError("negative importance ratio");
    if (ratios[i] > 0.0 && u * rho_max < ratios[i]) res.accepted.push_back(static_cast<int>(i));
  }
  res.ratios = std::move(ratios);
  res.failure = static_cast<long>(res.accepted.size()) < k;
  return res;
}

AcceptanceResult multi_rejection_filter(std::span<const Sample> data, const Policy& target,
                                        const PolicyRegistry& registry, const ResampleConfig& cfg,
                                        Rng& rng) {
  cfg.validate();
  if (data.empty()) throw ConfigError("empty dataset");
  auto ratios = multi_importance_ratios(data, target, registry);
  auto exact = exact_rho_max(target, registry);
  double rho_max;
  if (cfg.rho_max_mode == RhoMaxMode::known) {
    if (!exact) throw ConfigError("known rho_max requires an unconditional target");
    rho_max = *exact;
  } else {
    rho_max = *std::max_element(ratios.begin(), ratios.end());
  }
  long k = cfg.subset_size(static_cast<long>(data.size()));
  if (!(rho_max > 0.0)) throw AcceptanceError(0, k);
  AcceptanceResult res = accept_by_ratios(std::move(ratios), rho_max, k, rng);
  res.rho_max_exact = exact;
  if (res.accepted.empty()) throw AcceptanceError(0, k);
  return res;
}

AcceptanceResult single_rejection_filter(std::span<const Sample> data, const Policy& target,
                                         const PolicyRegistry& registry, const ResampleConfig& cfg,
                                         Rng& rng) {
  cfg.validate();
  if (data.empty()) throw ConfigError("empty dataset");
  const int P = registry.size();
  std::vector<double> ratios(data.size());
  std::vector<double> sup(P, 0.0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample& s = data[i];
    double num = target.prob(s.x, s.z);
    double den = registry.policy(s.policy_id).prob(s.x, s.z);
    if (num > 0.0 && !(den > 0.0)) throw SupportError("sample outside its policy's support");
    ratios[i] = num > 0.0 ? num / den : 0.0;
    sup[s.policy_id] = std::max(sup[s.policy_id], ratios[i]);
  }
  if (cfg.rho_max_mode == RhoMaxMode::known) {
    if (target.input_dim() != 0) throw ConfigError("known rho_max requires an unconditional target");
    Vec empty;
    Vec num = target.eval_probs(empty);
    for (int j = 0; j < P; ++j) {
      Vec den = registry.policy(j).eval_probs(empty);
      double mx = 0.0;
      for (Eigen::Index z = 0; z < num.size(); ++z) {
        if (num[z] == 0.0) continue;
        if (!(den[z] > 0.0)) throw SupportError("target outside a collecting policy's support");
        mx = std::max(mx, num[z] / den[z]);
      }
      sup[j] = mx;
    }
  }
  AcceptanceResult res;
  res.k = cfg.subset_size(static_cast<long>(data.size()));
  res.rho_max = *std::max_element(sup.begin(), sup.end());
  for (std::size_t i = 0; i < data.size(); ++i) {
    double u = rng.uniform();
    double m = sup[data[i].policy_id];
    if (ratios[i] > 0.0 && u * m < ratios[i]) res.accepted.push_back(static_cast<int>(i));
  }
  res.ratios = std::move(ratios);
  res.failure = static_cast<long>(res.accepted.size()) < res.k;
  return res;
}

std::vector<std::vector<int>> draw_subsets(std::span<const int> accepted, long k, int B, Rng& rng) {
  if (B < 1) throw ConfigError("B must be >= 1");
  if (k < 1) throw ConfigError("subset size must be >= 1");
  const long N = static_cast<long>(accepted.size());
  if (N < k) throw AcceptanceError(N, k);
  Rng base = rng.split(rng.next_u64());
  std::vector<std::vector<int>> out(B);
  std::vector<int> pool;
  for (int b = 0; b < B; ++b) {
    Rng r = base.split(static_cast<std::uint64_t>(b));
    pool.assign(accepted.begin(), accepted.end());
    for (long i = 0; i < k; ++i) {
      long j = i + static_cast<long>(r.below(static_cast<std::uint64_t>(N - i)));
      std::swap(pool[i], pool[j]);
    }
    out[b].assign(pool.begin(), pool.begin() + k);
  }
  return out;
}

std::vector<Sample> gather(std::span<const Sample> data, std::span<const int> idx) {
  std::vector<Sample> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(data[i]);
  return out;
}

namespace {

void finish(MseEstimate& est) {
  const auto& v = est.per_subset;
  est.subsets_used = static_cast<int>(v.size());
  if (v.empty()) {
    est.value = std::numeric_limits<double>::quiet_NaN();
    return;
  }
  double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  est.value = mean;
  est.stderr_ = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1) / v.size()) : 0.0;
}

SubsetValue proxy_value(const EstimatorFit& fit, const EstimatorState& reference, const EvalSet& eval) {
  return [&fit, &reference, &eval](std::span<const Sample> sub) {
    return proxy_mse(fit(sub), reference, eval);
  };
}

}  // namespace

MseEstimate rs_estimate(std::span<const Sample> data, const Policy& target,
                        const PolicyRegistry& registry, const SubsetValue& value,
                        const ResampleConfig& cfg, Rng& rng) {
  MseEstimate est;
  est.acceptance = multi_rejection_filter(data, target, registry, cfg, rng);
  est.k = est.acceptance.k;
  if (est.acceptance.failure)
    throw AcceptanceError(static_cast<long>(est.acceptance.accepted.size()), est.k);
  auto subsets = draw_subsets(est.acceptance.accepted, est.k, cfg.B, rng);
  for (const auto& idx : subsets) {
    auto sub = gather(data, idx);
    try {
      est.per_subset.push_back(value(sub));
    } catch (const RankDeficientError&) {
      ++est.fit_failures;
    } catch (const ConvergenceError&) {
      ++est.fit_failures;
    }
  }
  finish(est);
  return est;
}

MseEstimate rs_mse_estimate(std::span<const Sample> data, const Policy& target,
                            const PolicyRegistry& registry, const EstimatorFit& fit,
                            const EstimatorState& reference, const EvalSet& eval,
                            const ResampleConfig& cfg, Rng& rng) {
  return rs_estimate(data, target, registry, proxy_value(fit, reference, eval), cfg, rng);
}

MseEstimate is_estimate(std::span<const Sample> data, const Policy& target,
                        const SubsetValue& value, const ResampleConfig& cfg, Rng& rng,
                        double log_weight_cap) {
  cfg.validate();
  if (data.empty()) throw ConfigError("empty dataset");
  MseEstimate est;
  est.k = cfg.subset_size(static_cast<long>(data.size()));
  std::vector<double> logr(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample& s = data[i];
    double num = target.prob(s.x, s.z);
    if (num == 0.0) {
      logr[i] = -std::numeric_limits<double>::infinity();
      continue;
    }
    if (!(s.logged_propensity > 0.0)) throw SupportError("zero logged propensity under positive target");
    logr[i] = std::log(num) - std::log(s.logged_propensity);
  }
  std::vector<int> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  auto subsets = draw_subsets(all, est.k, cfg.B, rng);
  for (const auto& idx : subsets) {
    double lw = 0.0;
    for (int i : idx) lw += logr[i];
    if (lw == -std::numeric_limits<double>::infinity()) {
      est.per_subset.push_back(0.0);
      continue;
    }
    if (lw > log_weight_cap) {
      est.overflow = true;
      lw = log_weight_cap;
    }
    auto sub = gather(data, idx);
    try {
      est.per_subset.push_back(std::exp(lw) * value(sub));
    } catch (const RankDeficientError&) {
      ++est.fit_failures;
    } catch (const ConvergenceError&) {
      ++est.fit_failures;
    }
  }
  finish(est);
  return est;
}

MseEstimate is_mse_estimate(std::span<const Sample> data, const Policy& target,
                            const EstimatorFit& fit, const EstimatorState& reference,
                            const EvalSet& eval, const ResampleConfig& cfg, Rng& rng,
                            double log_weight_cap) {
  return is_estimate(data, target, proxy_value(fit, reference, eval), cfg, rng, log_weight_cap);
}

double binomial(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  return std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0));
}

double is_variance_deterministic(int n, int k, double rho_max, double alpha_k, int B) {
  if (n < 1 || k < 1 || k > n) throw ConfigError("need 1 <= k <= n");
  if (B < 0) throw ConfigError("B must be >= 0");
  double s = 0.0;
  for (int c = 1; c <= k; ++c)
    s += binomial(k, c) * binomial(n - k, k - c) * (std::pow(rho_max, c) - 1.0);
  double var_u = alpha_k * alpha_k * s / binomial(n, k);
  if (B == 0) return var_u;
  double b = static_cast<double>(B);
  return (1.0 - 1.0 / b) * var_u + alpha_k * alpha_k * (std::pow(rho_max, k) - 1.0) / b;
}

}  // namespace dia
