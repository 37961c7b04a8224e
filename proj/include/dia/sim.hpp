#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "dia/policy.hpp"
#include "dia/rng.hpp"
#include "dia/types.hpp"

namespace dia {

enum class DgpKind { iv, civ, misspec, binary_confounded };

std::string_view to_string(DgpKind k);
DgpKind parse_dgp_kind(std::string_view s);

// Sigmas are standard deviations. Empty theta0/gamma mean "use the kind's
// default" (gamma defaults to a seeded pattern, see make_dgp).
struct DgpConfig {
  DgpKind kind = DgpKind::iv;
  int num_instruments = 10;
  Vec theta0;
  Vec gamma;
  double sigma_u = 0.5;
  double sigma0 = 0.1;
  double sigma1 = 1.0;
  double sigma_a = 0.1;
  double sigma_y = 0.1;
  int covariate_dim = 0;
  int eval_size = 1000;

  static DgpConfig defaults(DgpKind kind);
  void validate() const;
};

struct Sample {
  Vec x;
  int z = 0;
  double a = 0.0;
  double y = 0.0;
  int policy_id = 0;
  double logged_propensity = 1.0;
};

using Dataset = std::vector<Sample>;

struct EvalPoint {
  Vec x;
  double a = 0.0;
};

class EvalSet {
 public:
  EvalSet() = default;
  explicit EvalSet(std::vector<EvalPoint> pts) : pts_(std::move(pts)) {}
  const std::vector<EvalPoint>& points() const { return pts_; }
  std::size_t size() const { return pts_.size(); }
  bool empty() const { return pts_.empty(); }

 private:
  std::vector<EvalPoint> pts_;
};

class DgpInstance {
 public:
  const DgpConfig& config() const { return cfg_; }
  DgpKind kind() const { return cfg_.kind; }
  int num_instruments() const { return cfg_.num_instruments; }
  int covariate_dim() const { return cfg_.covariate_dim; }
  const Vec& gamma() const { return cfg_.gamma; }
  const Vec& theta0() const { return cfg_.theta0; }
  const EvalSet& eval_set() const { return eval_; }
  bool binary_treatment() const { return cfg_.kind != DgpKind::misspec; }

  // g(x, a; theta0); E[U|x] = 0 for every kind so this is also f(x, a).
  double true_counterfactual(const Vec& x, double a) const;
  Vec draw_covariates(Rng& rng) const;
  // Draws one sample given covariates and instrument; p_out receives the
  // clipped treatment probability (binary kinds) for instrumentation.
  Sample draw(const Vec& x, int z, Rng& rng, double* p_out = nullptr) const;

 private:
  friend DgpInstance make_dgp(const DgpConfig& config, std::uint64_t seed);
  DgpConfig cfg_;
  EvalSet eval_;
};

// Default gamma: ceil(0.05 m) instruments at 0.95, as many at 0.05, the rest
// evenly spaced strictly between, then shuffled with the instance seed.
Vec default_gamma(int m, Rng& rng);

DgpInstance make_dgp(const DgpConfig& config, std::uint64_t seed);

// Appends n samples collected by registry[policy_id]. Sample i uses
// rng.split(i), so two calls with the same rng and different policies share
// every non-instrument random draw (common random numbers).
void sample_batch(const DgpInstance& dgp, const PolicyRegistry& registry, int policy_id, int n,
                  const Rng& rng, Dataset& out, std::vector<double>* p_trace = nullptr);
Dataset sample_batch(const DgpInstance& dgp, const PolicyRegistry& registry, int policy_id, int n,
                     const Rng& rng);

double clip01(double v);

using Predictor = std::function<double(const Vec& x, double a)>;

double true_mse(const DgpInstance& dgp, const Predictor& f, const EvalSet& eval);

}  // namespace dia
