#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "dia/estimators.hpp"
#include "dia/sim.hpp"
#include "dia/types.hpp"

namespace dia {

// V = E[XX'], J = E[A Z X X'], Sigma = E[eps^2 Z^2 X X'].
struct LinearMoments {
  Mat V, J, Sigma;
};

struct LinearAsymptotics {
  double scaled_mean = 0.0;      // limit of n * E[MSE]
  double scaled_variance = 0.0;  // limit of n^2 * Var[MSE]
  Mat U;
};

// U = V^{1/2} J^{-1} Sigma J^{-T} V^{1/2}; mean = nuclear norm, variance = 2 |U|_F^2.
LinearAsymptotics linear_asymptotics(const LinearMoments& mom);

// sigma0^2 / (1 - p) + sigma1^2 / p
double binary_instrument_objective(double p, double sigma0_sq, double sigma1_sq);
double binary_instrument_argmin(double sigma0_sq, double sigma1_sq);

// Scalar moments for a binary instrument with Pr(Z=1) = p entering through the
// feature Z - offset. a0/a1 are E[A|Z], s0/s1 are residual variances per arm.
LinearMoments binary_instrument_moments(double p, double a0, double a1, double s0_sq, double s1_sq,
                                        double offset);

struct BruteForceOptions {
  double grid_step = 0.05;
  int mc_trials = 200;
  int n_per_trial = 2000;
  std::size_t max_grid_points = 20000;
  std::uint64_t seed = 0;
};

struct BruteForceRow {
  Vec probs;
  double mean_mse = 0.0;
  double stderr_ = 0.0;
  int failures = 0;  // trials whose fit was rank-deficient
};

struct BruteForceResult {
  Vec best;
  double best_mse = 0.0;
  std::vector<BruteForceRow> table;
};

// All points of the simplex with coordinates in multiples of step.
std::vector<Vec> simplex_grid(int m, double step, std::size_t cap);

// Monte-Carlo E[MSE] for each fixed unconditional policy on the grid. Trial t
// uses the same stream at every grid point. A point with any failed fit gets
// mean_mse = +inf.
BruteForceResult brute_force_policy(const DgpInstance& dgp, const EstimatorSpec& estimator,
                                    const BruteForceOptions& opts);

// Mean and stderr of true MSE over trials for one fixed policy.
BruteForceRow monte_carlo_mse(const DgpInstance& dgp, const EstimatorSpec& estimator,
                              const Vec& probs, int trials, int n, const Rng& rng);

}  // namespace dia
