#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "dia/estimators.hpp"

namespace dia {

struct InfluenceConfig {
  int order = 1;  // K in {1, 2}
  double cg_tol = 1e-8;
  int cg_max_iter = 0;  // 0: the system dimension
  double damping = 0.0;

  void validate() const;
};

struct CgResult {
  Vec x;
  bool converged = false;
  int iterations = 0;
  double residual = 0.0;  // ||A x - b|| / ||b||
};

// Matrix-free conjugate gradients on A + damping * I.
CgResult cg_solve(const std::function<Vec(const Vec&)>& apply, const Vec& rhs,
                  const InfluenceConfig& cfg);

// A differentiable scalar functional of theta.
class MseFunctional {
 public:
  virtual ~MseFunctional() = default;
  virtual double value(const Vec& theta) const = 0;
  virtual Vec gradient(const Vec& theta) const = 0;
  virtual Vec hvp(const Vec& theta, const Vec& v) const = 0;
};

// Mean over an eval set of (f(x, a; theta) - reference(x, a))^2.
class PredictionMse final : public MseFunctional {
 public:
  PredictionMse(std::shared_ptr<const MomentModel> model, EvalSet eval, Vec reference);
  // Reference = predictions of a fitted state (the subset-vs-full proxy).
  static PredictionMse proxy(const EstimatorState& reference, const EvalSet& eval);
  // Reference = the DGP's true counterfactual.
  static PredictionMse truth(const DgpInstance& dgp, std::shared_ptr<const MomentModel> model,
                             const EvalSet& eval);

  double value(const Vec& theta) const override;
  Vec gradient(const Vec& theta) const override;
  Vec hvp(const Vec& theta, const Vec& v) const override;
  std::size_t distinct_points() const { return pts_.size(); }

 private:
  std::shared_ptr<const MomentModel> model_;
  std::vector<EvalPoint> pts_;  // distinct points
  Vec w_;                       // multiplicity / eval size
  Vec ref_;
};

// (theta - ref)'(theta - ref)
class ParameterMse final : public MseFunctional {
 public:
  explicit ParameterMse(Vec ref) : ref_(std::move(ref)) {}
  double value(const Vec& theta) const override { return (theta - ref_).squaredNorm(); }
  Vec gradient(const Vec& theta) const override { return 2.0 * (theta - ref_); }
  Vec hvp(const Vec&, const Vec& v) const override { return 2.0 * v; }

 private:
  Vec ref_;
};

struct InfluenceReport {
  Mat theta;       // row i: I_theta(S_i)
  Vec first;       // I^(1)_MSE(S_i)
  Vec mse;         // I^(1) + (eps/2) I_theta' H I_theta when K = 2, else I^(1)
  Vec loo_delta;   // (-eps) * mse: predicted MSE(D_n) - MSE(D_n \ i)
  Vec theta_adjoint;  // u = (dM/dtheta)^-T grad MSE
  Vec phi_adjoint;    // w = (dQ/dphi)^-T (dM/dphi)' u
  double epsilon = 0.0;
  int cg_iterations = 0;
};

Vec influence_theta(const EstimatorState& state, std::span<const Sample> data, std::size_t index,
                    const InfluenceConfig& cfg = {});
// Same formula with caller-supplied per-sample moments (q, m).
Vec influence_theta_from_moments(const EstimatorState& state, std::span<const Sample> data,
                                 const Vec& q, const Vec& m, const InfluenceConfig& cfg = {});
double influence_mse(const EstimatorState& state, std::span<const Sample> data, std::size_t index,
                     const MseFunctional& mse, const InfluenceConfig& cfg = {});
InfluenceReport influence_all(const EstimatorState& state, std::span<const Sample> data,
                              const MseFunctional& mse, const InfluenceConfig& cfg = {});

struct DenseJacobians {
  Mat q_phi;      // dQ_n/dphi
  Mat m_theta;    // dM_n/dtheta
  Mat m_phi;      // dM_n/dphi
};

// Column-by-column from the matrix-free products.
DenseJacobians dense_jacobians(const EstimatorState& state, std::span<const Sample> data);
// Direct assembly for twostage_ls from its closed-form expressions.
DenseJacobians dense_jacobians_2sls(const TwoStageLsConfig& cfg, const EstimatorState& state,
                                    std::span<const Sample> data);

}  // namespace dia
