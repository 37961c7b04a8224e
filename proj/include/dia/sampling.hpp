#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "dia/estimators.hpp"
#include "dia/policy.hpp"
#include "dia/rng.hpp"
#include "dia/sim.hpp"

namespace dia {

enum class RhoMaxMode { known, empirical_supremum };

struct ResampleConfig {
  double alpha = 0.65;
  int B = 16;
  RhoMaxMode rho_max_mode = RhoMaxMode::empirical_supremum;
  std::uint64_t seed = 0;
  // When > 0, replaces ceil(n^alpha).
  long subset_size_override = 0;

  long subset_size(long n) const;
  void validate() const;
};

struct AcceptanceResult {
  std::vector<int> accepted;
  std::vector<double> ratios;
  double rho_max = 0.0;
  // Exact max over the instrument grid, when computable (unconditional target).
  std::optional<double> rho_max_exact;
  long k = 0;
  bool failure = false;  // accepted.size() < k
};

// pi'(z|x) / ((1/n) sum_j pi_j(z|x)); throws SupportError when the
// denominator vanishes under positive target mass.
double multi_importance_ratio(const Sample& s, const Policy& target, const PolicyRegistry& registry);
std::vector<double> multi_importance_ratios(std::span<const Sample> data, const Policy& target,
                                            const PolicyRegistry& registry);
// max_z pi'(z) / avg(z) for unconditional policies.
std::optional<double> exact_rho_max(const Policy& target, const PolicyRegistry& registry);

// Accept sample i with probability ratios[i] / rho_max; consumes one uniform
// per sample.
AcceptanceResult accept_by_ratios(std::vector<double> ratios, double rho_max, long k, Rng& rng);

AcceptanceResult multi_rejection_filter(std::span<const Sample> data, const Policy& target,
                                        const PolicyRegistry& registry, const ResampleConfig& cfg,
                                        Rng& rng);
// Classic rejection: each sample is compared with its own collecting policy
// and normalised by that policy's own ratio supremum.
AcceptanceResult single_rejection_filter(std::span<const Sample> data, const Policy& target,
                                         const PolicyRegistry& registry, const ResampleConfig& cfg,
                                         Rng& rng);

// B independent uniform without-replacement subsets of size k. Throws
// AcceptanceError when accepted.size() < k.
std::vector<std::vector<int>> draw_subsets(std::span<const int> accepted, long k, int B, Rng& rng);

std::vector<Sample> gather(std::span<const Sample> data, std::span<const int> idx);

using EstimatorFit = std::function<EstimatorState(std::span<const Sample>)>;
// Scalar statistic of a subset (e.g. its proxy MSE).
using SubsetValue = std::function<double(std::span<const Sample>)>;

struct MseEstimate {
  double value = 0.0;
  double stderr_ = 0.0;  // across subsets
  int subsets_used = 0;
  int fit_failures = 0;
  bool overflow = false;
  long k = 0;
  std::vector<double> per_subset;
  AcceptanceResult acceptance;
};

// Generic incomplete U-statistic over rejection-filtered subsets. Subsets
// whose value throws RankDeficientError or ConvergenceError are skipped and
// counted.
MseEstimate rs_estimate(std::span<const Sample> data, const Policy& target,
                        const PolicyRegistry& registry, const SubsetValue& value,
                        const ResampleConfig& cfg, Rng& rng);
MseEstimate rs_mse_estimate(std::span<const Sample> data, const Policy& target,
                            const PolicyRegistry& registry, const EstimatorFit& fit,
                            const EstimatorState& reference, const EvalSet& eval,
                            const ResampleConfig& cfg, Rng& rng);

// Importance-weighted incomplete U-statistic over subsets of the whole
// dataset, weight prod_i pi'(z_i|x_i) / logged_propensity_i accumulated in
// log space. overflow is set when a log-weight exceeds log_weight_cap (the
// weight is then clamped).
MseEstimate is_estimate(std::span<const Sample> data, const Policy& target,
                        const SubsetValue& value, const ResampleConfig& cfg, Rng& rng,
                        double log_weight_cap = 700.0);
MseEstimate is_mse_estimate(std::span<const Sample> data, const Policy& target,
                            const EstimatorFit& fit, const EstimatorState& reference,
                            const EvalSet& eval, const ResampleConfig& cfg, Rng& rng,
                            double log_weight_cap = 700.0);

// Exact variance of the complete (B = 0) or incomplete importance-sampled
// U-statistic for a deterministic DGP and deterministic target:
//   Var U = a^2 C(n,k)^-1 sum_{c=1..k} C(k,c) C(n-k,k-c) (rho^c - 1)
//   Var U_B = (1 - 1/B) Var U + a^2 (rho^k - 1) / B
double is_variance_deterministic(int n, int k, double rho_max, double alpha_k, int B = 0);

double binomial(int n, int k);

}  // namespace dia
