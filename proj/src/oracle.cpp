#include "dia/oracle.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <string>

#include "dia/errors.hpp"
#include "dia/policy.hpp"

namespace dia {

LinearAsymptotics linear_asymptotics(const LinearMoments& mom) {
  const auto d = mom.V.rows();
  if (d == 0 || mom.V.cols() != d || mom.J.rows() != d || mom.J.cols() != d ||
      mom.Sigma.rows() != d || mom.Sigma.cols() != d)
    throw ConfigError("linear moments must be square with equal dimensions");
  Eigen::FullPivLU<Mat> lu(mom.J);
  if (!lu.isInvertible()) throw RankDeficientError("J is singular");
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (mom.V + mom.V.transpose()));
  Vec ev = es.eigenvalues();
  if (ev.minCoeff() < -1e-12 * std::max(1.0, ev.cwiseAbs().maxCoeff()))
    throw ConfigError("V is not positive semi-definite");
  Mat root = es.eigenvectors() * ev.cwiseMax(0.0).cwiseSqrt().asDiagonal() *
             es.eigenvectors().transpose();
  Mat Jinv = lu.inverse();
  LinearAsymptotics out;
  out.U = root * Jinv * mom.Sigma * Jinv.transpose() * root;
  Eigen::JacobiSVD<Mat> svd(out.U);
  out.scaled_mean = svd.singularValues().sum();
  out.scaled_variance = 2.0 * out.U.squaredNorm();
  return out;
}

double binary_instrument_objective(double p, double sigma0_sq, double sigma1_sq) {
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("p must lie in (0, 1)");
  return sigma0_sq / (1.0 - p) + sigma1_sq / p;
}

double binary_instrument_argmin(double sigma0_sq, double sigma1_sq) {
  if (!(sigma0_sq > 0.0 && sigma1_sq > 0.0)) throw ConfigError("variances must be positive");
  double a = std::sqrt(sigma0_sq), b = std::sqrt(sigma1_sq);
  return b / (a + b);
}

LinearMoments binary_instrument_moments(double p, double a0, double a1, double s0_sq, double s1_sq,
                                        double offset) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("p must lie in [0, 1]");
  double w1 = 1.0 - offset, w0 = -offset;
  LinearMoments mom;
  mom.V = Mat::Ones(1, 1);
  mom.J = Mat::Constant(1, 1, p * w1 * a1 + (1.0 - p) * w0 * a0);
  mom.Sigma = Mat::Constant(1, 1, p * w1 * w1 * s1_sq + (1.0 - p) * w0 * w0 * s0_sq);
  return mom;
}

std::vector<Vec> simplex_grid(int m, double step, std::size_t cap) {
  if (m < 1) throw ConfigError("simplex_grid needs m >= 1");
  if (!(step > 0.0 && step <= 1.0)) throw ConfigError("grid step must lie in (0, 1]");
  const long S = std::lround(1.0 / step);
  if (std::abs(S * step - 1.0) > 1e-9) throw ConfigError("grid step must divide 1");
  // count = C(S + m - 1, m - 1)
  double count = std::exp(std::lgamma(S + m) - std::lgamma(S + 1.0) - std::lgamma(m));
  if (count > static_cast<double>(cap) + 0.5)
    throw ConfigError("simplex grid has " + std::to_string(std::llround(count)) +
                      " points, above the cap of " + std::to_string(cap));
  std::vector<Vec> out;
  std::vector<long> c(m, 0);
  // lexicographic enumeration of compositions of S into m parts
  auto emit = [&] {
    Vec v(m);
    for (int j = 0; j < m; ++j) v[j] = static_cast<double>(c[j]) / static_cast<double>(S);
    out.push_back(v);
  };
  std::function<void(int, long)> rec = [&](int j, long left) {
    if (j == m - 1) {
      c[j] = left;
      emit();
      return;
    }
    for (long v = 0; v <= left; ++v) {
      c[j] = v;
      rec(j + 1, left - v);
    }
  };
  rec(0, S);
  return out;
}

namespace {

Policy fixed_policy(const Vec& probs, int input_dim) {
  Vec logits(probs.size());
  for (Eigen::Index j = 0; j < probs.size(); ++j)
    logits[j] = probs[j] > 0.0 ? std::log(probs[j]) : -std::numeric_limits<double>::infinity();
  return Policy::softmax(logits, input_dim);
}

}  // namespace

BruteForceRow monte_carlo_mse(const DgpInstance& dgp, const EstimatorSpec& estimator,
                              const Vec& probs, int trials, int n, const Rng& rng) {
  if (trials < 1 || n < 1) throw ConfigError("trials and n must be >= 1");
  PolicyRegistry reg;
  int id = reg.add(fixed_policy(probs, dgp.covariate_dim()), n);
  BruteForceRow row;
  row.probs = probs;
  double s = 0.0, s2 = 0.0;
  int ok = 0;
  for (int t = 0; t < trials; ++t) {
    Dataset d = sample_batch(dgp, reg, id, n, rng.split(static_cast<std::uint64_t>(t)));
    try {
      double v = true_mse(dgp, fit_estimator(estimator, d), dgp.eval_set());
      s += v;
      s2 += v * v;
      ++ok;
    } catch (const RankDeficientError&) {
      ++row.failures;
    }
  }
  if (row.failures > 0 || ok == 0) {
    row.mean_mse = std::numeric_limits<double>::infinity();
    row.stderr_ = std::numeric_limits<double>::quiet_NaN();
    return row;
  }
  row.mean_mse = s / ok;
  double var = ok > 1 ? std::max(0.0, (s2 - ok * row.mean_mse * row.mean_mse) / (ok - 1)) : 0.0;
  row.stderr_ = std::sqrt(var / ok);
  return row;
}

BruteForceResult brute_force_policy(const DgpInstance& dgp, const EstimatorSpec& estimator,
                                    const BruteForceOptions& opts) {
  if (dgp.covariate_dim() != 0) throw ConfigError("brute force supports unconditional policies only");
  auto grid = simplex_grid(dgp.num_instruments(), opts.grid_step, opts.max_grid_points);
  Rng root(opts.seed);
  BruteForceResult res;
  res.best_mse = std::numeric_limits<double>::infinity();
  for (const auto& p : grid) {
    res.table.push_back(monte_carlo_mse(dgp, estimator, p, opts.mc_trials, opts.n_per_trial, root));
    const auto& row = res.table.back();
    if (row.mean_mse < res.best_mse) {
      res.best_mse = row.mean_mse;
      res.best = p;
    }
  }
  if (res.best.size() == 0) throw RankDeficientError("every grid point had failing fits");
  return res;
}

}  // namespace dia
