#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "dia/estimators.hpp"
#include "dia/influence.hpp"
#include "dia/policy.hpp"
#include "dia/sampling.hpp"
#include "dia/sim.hpp"

namespace dia {

enum class GradientKind { naive, cv, influence };
std::string_view to_string(GradientKind k);

struct GradientEstimate {
  Vec gradient;
  GradientKind kind = GradientKind::naive;
  // Per-sample scalar multiplying the score (MSE, LOO delta, or influence).
  Vec weights;
};

struct AdamState {
  Vec m, v;
  int t = 0;
  double lr = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Descent step: w <- w - lr * mhat / (sqrt(vhat) + eps).
void adam_step(AdamState& st, Vec& weights, const Vec& grad);

GradientEstimate grad_naive(std::span<const Sample> data, const Policy& policy, double mse_value);
GradientEstimate grad_cv(std::span<const Sample> data, const Policy& policy, double full_mse,
                         std::span<const double> loo_mses);
// Mean over subsets of sum_i score_eff(S_i) * report.loo_delta[i].
GradientEstimate grad_if(const std::vector<std::vector<Sample>>& subsets, const Policy& eff_policy,
                         const std::vector<InfluenceReport>& reports);

// MSE of every exact leave-one-out 2SLS refit; NaN where the refit is singular.
std::vector<double> exact_loo_mses(std::span<const Sample> data, const TwoStageLsConfig& cfg,
                                   const MseFunctional& mse);

struct OptimizeOptions {
  int steps = 200;
  double lr = 0.05;
  double grad_tol = 1e-4;
  int patience = 10;
  long k_floor = 32;
  int k_retries = 3;
  ResampleConfig resample;
  // Order 2 by default: with instrument-only scores the first-order term sums
  // to zero within each instrument cell for cell-decoupled estimators.
  InfluenceConfig influence{.order = 2};
};

struct OptimizeResult {
  Policy policy = Policy::uniform(1);
  int steps = 0;
  long k_used = 0;
  long accepted = 0;  // N' at the last step
  double rho_max = 0.0;
  int k_shrinks = 0;
  int fit_failures = 0;
  std::vector<double> objective;  // mean subset proxy MSE per step
};

// Adapts the learnable policy `init` so that the mixture of past data and the
// remaining budget minimises the proxy MSE. `data` was collected under
// `registry`, budget_N is the final total sample count.
OptimizeResult optimize_policy(std::span<const Sample> data, const PolicyRegistry& registry,
                               const EvalSet& eval, long budget_N, const Policy& init,
                               const EstimatorSpec& estimator, const OptimizeOptions& opts,
                               const Rng& rng);

struct DiaOptions {
  int K = 5;
  int batch_n = 1000;
  EstimatorSpec estimator;
  OptimizeOptions optimize;
  // Keep the learned policy between allocations instead of resetting it.
  bool warm_start_policy = true;
};

struct AllocationRecord {
  int allocation = 0;
  long samples = 0;  // cumulative
  double mse = 0.0;  // true MSE of the fit on all samples so far
  Policy policy = Policy::uniform(1);
  long accepted = 0;
  long k_used = 0;
  int grad_steps = 0;
  double rho_max = 0.0;
};

struct AllocationTrace {
  std::vector<AllocationRecord> records;
  Dataset data;
  PolicyRegistry registry;
  EstimatorState final_state;
};

// Batch j of either arm is drawn from rng.split(j), so the two arms share the
// first batch exactly and use common random numbers afterwards.
AllocationTrace run_dia(const DgpInstance& dgp, const DiaOptions& opts, const Rng& rng);
AllocationTrace run_uniform(const DgpInstance& dgp, const DiaOptions& opts, const Rng& rng);

Policy initial_learnable_policy(const DgpInstance& dgp, const Rng& rng);

}  // namespace dia
