#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string_view>
#include <utility>

#include "dia/sim.hpp"
#include "dia/types.hpp"

namespace dia {

enum class EstimatorFamily { twostage_ls, logistic_civ, neural_civ };
enum class InstrumentEncoding { one_hot, index };
// Outcome basis b(a) for the linear second stage, f(a) = b(a)' theta:
//   treatment           [a]
//   treatment_control   [a, 1 - a]
//   treatment_intercept [a, 1]
enum class OutcomeBasis { treatment, treatment_control, treatment_intercept };

std::string_view to_string(EstimatorFamily f);
EstimatorFamily parse_estimator_family(std::string_view s);
std::string_view to_string(OutcomeBasis b);
OutcomeBasis parse_outcome_basis(std::string_view s);
std::string_view to_string(InstrumentEncoding e);
InstrumentEncoding parse_instrument_encoding(std::string_view s);

struct TwoStageLsConfig {
  int num_instruments = 2;
  InstrumentEncoding encoding = InstrumentEncoding::one_hot;
  // index encoding uses the scalar instrument w = z - index_offset
  double index_offset = 0.0;
  OutcomeBasis basis = OutcomeBasis::treatment_control;
};

struct LogisticCivConfig {
  int num_instruments = 2;
  double ridge = 1e-3;
};

struct NeuralCivConfig {
  int num_instruments = 2;
  int covariate_dim = 0;
  int hidden = 8;
  double ridge = 1e-3;
  std::uint64_t init_seed = 0;
};

// Two-stage moment model. Stage one solves Q_n(phi) = mean q(S; phi)
// = 0, stage two solves M_n(theta, phi) = mean m(S; theta, phi) = 0. Every
// family has q = grad_phi L1 and m = grad_theta L2, so the Jacobians below are
// Hessian blocks and dM/dphi' u is a directional derivative of grad_phi L2.
class MomentModel {
 public:
  virtual ~MomentModel() = default;
  virtual EstimatorFamily family() const = 0;
  virtual int theta_dim() const = 0;
  virtual int phi_dim() const = 0;

  virtual Vec q(const Sample& s, const Vec& phi) const = 0;
  virtual Vec m(const Sample& s, const Vec& theta, const Vec& phi) const = 0;
  virtual Vec Q(std::span<const Sample> data, const Vec& phi) const = 0;
  virtual Vec M(std::span<const Sample> data, const Vec& theta, const Vec& phi) const = 0;

  // (dQ_n/dphi) v
  virtual Vec jvp_q_phi(std::span<const Sample> data, const Vec& phi, const Vec& v) const = 0;
  // (dM_n/dtheta) v
  virtual Vec jvp_m_theta(std::span<const Sample> data, const Vec& theta, const Vec& phi,
                          const Vec& v) const = 0;
  // (dM_n/dphi) v
  virtual Vec jvp_m_phi(std::span<const Sample> data, const Vec& theta, const Vec& phi,
                        const Vec& v) const = 0;
  // (dM_n/dphi)' u
  virtual Vec vjp_m_phi(std::span<const Sample> data, const Vec& theta, const Vec& phi,
                        const Vec& u) const = 0;

  virtual double predict(const Vec& theta, const Vec& x, double a) const = 0;
  virtual Vec predict_grad(const Vec& theta, const Vec& x, double a) const = 0;
  // (d^2 f / dtheta^2) v
  virtual Vec predict_hvp(const Vec& theta, const Vec& x, double a, const Vec& v) const = 0;

  // Starting point for gradient fits (seeded for neural families).
  virtual std::pair<Vec, Vec> initial_params() const = 0;
};

std::shared_ptr<const MomentModel> make_twostage_ls(const TwoStageLsConfig& cfg);
std::shared_ptr<const MomentModel> make_logistic_civ(const LogisticCivConfig& cfg);
std::shared_ptr<const MomentModel> make_neural_civ(const NeuralCivConfig& cfg);

struct FitDiagnostics {
  bool converged = true;
  double q_norm = 0.0;  // sup-norm of Q_n at the returned phi
  double m_norm = 0.0;  // sup-norm of M_n at the returned (theta, phi)
  int stage1_iters = 0;
  int stage2_iters = 0;
  bool closed_form = false;
};

struct EstimatorState {
  std::shared_ptr<const MomentModel> model;
  Vec theta;
  Vec phi;
  FitDiagnostics diag;
};

struct FitOptions {
  double lr = 1e-2;
  int max_iter = 5000;
  double tol = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // Newton-CG steps on the moment system after Adam, kept only when they
  // reduce the moment sup-norm.
  int newton_iter = 50;
};

// Closed-form linear sufficient statistics for 2SLS. Removing a sample is a
// subtraction, which makes exact leave-one-out refits O(1) in n.
struct LinearIvStats {
  double n = 0.0;
  Vec sw;   // sum w
  Mat sww;  // sum w w'
  Vec swa;  // sum w a
  double sy = 0.0;
  Vec swy;  // sum w y

  explicit LinearIvStats(int p = 0);
  void add(const Vec& w, double a, double y, double weight = 1.0);
};

Vec instrument_features(const TwoStageLsConfig& cfg, int z);
LinearIvStats linear_iv_stats(const TwoStageLsConfig& cfg, std::span<const Sample> data);
// Throws RankDeficientError when either stage is singular; instrument
// columns that never occur get phi = 0.
std::pair<Vec, Vec> solve_2sls(const TwoStageLsConfig& cfg, const LinearIvStats& st);

EstimatorState fit_2sls(std::span<const Sample> data, const TwoStageLsConfig& cfg);
// Exact leave-one-out refits; row i is theta(D \ i), NaN when that refit is
// singular.
Mat loo_thetas_2sls(std::span<const Sample> data, const TwoStageLsConfig& cfg);

// Solves Q_n = 0 then M_n = 0 by Adam followed by a Newton polish. `init`
// (if given) supplies the warm start. Non-convergence is reported through
// diag.converged, not thrown.
EstimatorState fit_two_stage(std::shared_ptr<const MomentModel> model, std::span<const Sample> data,
                             const EstimatorState* init, const FitOptions& opts);

// Family choice plus options, used wherever the engine needs "refit on a
// subset".
struct EstimatorSpec {
  EstimatorFamily family = EstimatorFamily::twostage_ls;
  TwoStageLsConfig tsls;
  LogisticCivConfig logistic;
  NeuralCivConfig neural;
  FitOptions fit;

  std::shared_ptr<const MomentModel> make_model() const;
  bool closed_form() const { return family == EstimatorFamily::twostage_ls; }
};

EstimatorSpec default_estimator(const DgpInstance& dgp);
EstimatorState fit_estimator(const EstimatorSpec& spec, std::span<const Sample> data,
                             const EstimatorState* warm = nullptr);

double predict_f(const EstimatorState& state, const Vec& x, double a);
// Mean over eval of (f(.; full) - f(.; sub))^2.
double proxy_mse(const EstimatorState& sub, const EstimatorState& full, const EvalSet& eval);
double true_mse(const DgpInstance& dgp, const EstimatorState& state, const EvalSet& eval);
std::pair<Vec, Vec> moment_eval(const EstimatorState& state, const Sample& s);

}  // namespace dia
