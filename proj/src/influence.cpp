#include "dia/influence.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dia/errors.hpp"

namespace dia {

void InfluenceConfig::validate() const {
  if (order != 1 && order != 2) throw ConfigError("influence order must be 1 or 2");
  if (!(cg_tol > 0.0)) throw ConfigError("cg_tol must be > 0");
  if (cg_max_iter < 0) throw ConfigError("cg_max_iter must be >= 0");
  if (damping < 0.0) throw ConfigError("damping must be >= 0");
}

CgResult cg_solve(const std::function<Vec(const Vec&)>& apply, const Vec& rhs,
                  const InfluenceConfig& cfg) {
  cfg.validate();
  CgResult res;
  const int n = static_cast<int>(rhs.size());
  const int max_iter = cfg.cg_max_iter > 0 ? cfg.cg_max_iter : n;
  res.x = Vec::Zero(n);
  double bnorm = rhs.norm();
  if (bnorm == 0.0) {
    res.converged = true;
    return res;
  }
  auto A = [&](const Vec& v) {
    Vec out = apply(v);
    if (cfg.damping > 0.0) out += cfg.damping * v;
    return out;
  };
  Vec r = rhs, p = r;
  double rr = r.squaredNorm();
  const double target = cfg.cg_tol * bnorm;
  int it = 0;
  while (std::sqrt(rr) > target && it < max_iter) {
    Vec Ap = A(p);
    double pAp = p.dot(Ap);
    if (!(pAp > 0.0)) break;  // not positive definite along p
    double alpha = rr / pAp;
    res.x += alpha * p;
    r -= alpha * Ap;
    double rr_new = r.squaredNorm();
    p = r + (rr_new / rr) * p;
    rr = rr_new;
    ++it;
  }
  // recompute the true residual; the recursive one drifts
  double true_res = (A(res.x) - rhs).norm();
  res.iterations = it;
  res.residual = true_res / bnorm;
  res.converged = true_res <= target;
  return res;
}

PredictionMse::PredictionMse(std::shared_ptr<const MomentModel> model, EvalSet eval, Vec reference)
    : model_(std::move(model)) {
  if (!model_) throw ConfigError("null model");
  if (eval.empty()) throw ConfigError("empty eval set");
  if (static_cast<std::size_t>(reference.size()) != eval.size())
    throw ConfigError("reference length != eval size");
  // Merge repeated (x, a, reference) triples into weighted points.
  const auto& pts = eval.points();
  std::vector<std::size_t> order(pts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto key_less = [&](std::size_t i, std::size_t j) {
    if (pts[i].a != pts[j].a) return pts[i].a < pts[j].a;
    if (reference[i] != reference[j]) return reference[i] < reference[j];
    return std::lexicographical_compare(pts[i].x.data(), pts[i].x.data() + pts[i].x.size(),
                                        pts[j].x.data(), pts[j].x.data() + pts[j].x.size());
  };
  std::stable_sort(order.begin(), order.end(), key_less);
  std::vector<double> w, r;
  std::size_t prev = 0;
  for (std::size_t i : order) {
    if (!pts_.empty() && !key_less(prev, i) && !key_less(i, prev)) {
      w.back() += 1.0;
    } else {
      pts_.push_back(pts[i]);
      r.push_back(reference[i]);
      w.push_back(1.0);
    }
    prev = i;
  }
  ref_ = Eigen::Map<Vec>(r.data(), static_cast<Eigen::Index>(r.size()));
  w_ = Eigen::Map<Vec>(w.data(), static_cast<Eigen::Index>(w.size())) / static_cast<double>(pts.size());
}

PredictionMse PredictionMse::proxy(const EstimatorState& reference, const EvalSet& eval) {
  Vec ref(eval.size());
  for (std::size_t i = 0; i < eval.size(); ++i)
    ref[i] = reference.model->predict(reference.theta, eval.points()[i].x, eval.points()[i].a);
  return PredictionMse(reference.model, eval, std::move(ref));
}

PredictionMse PredictionMse::truth(const DgpInstance& dgp, std::shared_ptr<const MomentModel> model,
                                   const EvalSet& eval) {
  Vec ref(eval.size());
  for (std::size_t i = 0; i < eval.size(); ++i)
    ref[i] = dgp.true_counterfactual(eval.points()[i].x, eval.points()[i].a);
  return PredictionMse(std::move(model), eval, std::move(ref));
}

double PredictionMse::value(const Vec& theta) const {
  double s = 0.0;
  for (std::size_t i = 0; i < pts_.size(); ++i) {
    double d = model_->predict(theta, pts_[i].x, pts_[i].a) - ref_[i];
    s += w_[i] * d * d;
  }
  return s;
}

Vec PredictionMse::gradient(const Vec& theta) const {
  Vec g = Vec::Zero(theta.size());
  for (std::size_t i = 0; i < pts_.size(); ++i) {
    double d = model_->predict(theta, pts_[i].x, pts_[i].a) - ref_[i];
    g += (2.0 * w_[i] * d) * model_->predict_grad(theta, pts_[i].x, pts_[i].a);
  }
  return g;
}

Vec PredictionMse::hvp(const Vec& theta, const Vec& v) const {
  Vec h = Vec::Zero(theta.size());
  for (std::size_t i = 0; i < pts_.size(); ++i) {
    double d = model_->predict(theta, pts_[i].x, pts_[i].a) - ref_[i];
    Vec gf = model_->predict_grad(theta, pts_[i].x, pts_[i].a);
    h += (2.0 * w_[i]) * (gf.dot(v) * gf + d * model_->predict_hvp(theta, pts_[i].x, pts_[i].a, v));
  }
  return h;
}

namespace {

struct Solver {
  const EstimatorState& st;
  std::span<const Sample> data;
  const InfluenceConfig& cfg;
  int iterations = 0;

  Vec solve(const std::function<Vec(const Vec&)>& A, const Vec& b, const char* what) {
    CgResult r = cg_solve(A, b, cfg);
    iterations += r.iterations;
    if (!r.converged)
      throw ConvergenceError(std::string("CG did not converge on ") + what +
                             " (relative residual " + std::to_string(r.residual) + ")");
    return r.x;
  }
  Vec solve_q(const Vec& b) {
    return solve([&](const Vec& v) { return st.model->jvp_q_phi(data, st.phi, v); }, b,
                 "dQ/dphi");
  }
  Vec solve_m(const Vec& b) {
    return solve([&](const Vec& v) { return st.model->jvp_m_theta(data, st.theta, st.phi, v); }, b,
                 "dM/dtheta");
  }
};

void check_state(const EstimatorState& st, std::span<const Sample> data) {
  if (!st.model) throw ConfigError("state has no model");
  if (data.empty()) throw ConfigError("empty dataset");
}

}  // namespace

Vec influence_theta_from_moments(const EstimatorState& state, std::span<const Sample> data,
                                 const Vec& q, const Vec& m, const InfluenceConfig& cfg) {
  check_state(state, data);
  cfg.validate();
  Solver s{state, data, cfg};
  Vec t = m;
  if (q.size() != state.model->phi_dim() || m.size() != state.model->theta_dim())
    throw ConfigError("moment dimension mismatch");
  if (q.squaredNorm() > 0.0) t -= state.model->jvp_m_phi(data, state.theta, state.phi, s.solve_q(q));
  return -s.solve_m(t);
}

Vec influence_theta(const EstimatorState& state, std::span<const Sample> data, std::size_t index,
                    const InfluenceConfig& cfg) {
  if (index >= data.size()) throw ConfigError("sample index out of range");
  auto [q, m] = moment_eval(state, data[index]);
  return influence_theta_from_moments(state, data, q, m, cfg);
}

double influence_mse(const EstimatorState& state, std::span<const Sample> data, std::size_t index,
                     const MseFunctional& mse, const InfluenceConfig& cfg) {
  Vec it = influence_theta(state, data, index, cfg);
  double v = mse.gradient(state.theta).dot(it);
  if (cfg.order == 2) {
    double eps = -1.0 / static_cast<double>(data.size());
    v += 0.5 * eps * it.dot(mse.hvp(state.theta, it));
  }
  return v;
}

InfluenceReport influence_all(const EstimatorState& state, std::span<const Sample> data,
                              const MseFunctional& mse, const InfluenceConfig& cfg) {
  check_state(state, data);
  cfg.validate();
  const MomentModel& mm = *state.model;
  const int d1 = mm.theta_dim();
  const int d2 = mm.phi_dim();
  const std::size_t n = data.size();
  Solver s{state, data, cfg};

  InfluenceReport rep;
  rep.epsilon = -1.0 / static_cast<double>(n);
  Vec g = mse.gradient(state.theta);
  rep.theta_adjoint = s.solve_m(g);
  rep.phi_adjoint = s.solve_q(mm.vjp_m_phi(data, state.theta, state.phi, rep.theta_adjoint));

  // I_theta_i = -A m_i + C q_i with A = (dM/dtheta)^-1, C = A (dM/dphi) (dQ/dphi)^-1.
  // Both Jacobians are symmetric, so row r of C is (dQ/dphi)^-1 (dM/dphi)' A e_r.
  Mat A(d1, d1), C(d1, d2);
  for (int r = 0; r < d1; ++r) {
    Vec a = s.solve_m(Vec::Unit(d1, r));
    A.col(r) = a;
    C.row(r) = s.solve_q(mm.vjp_m_phi(data, state.theta, state.phi, a)).transpose();
  }

  Mat H;
  if (cfg.order == 2) {
    H.resize(d1, d1);
    for (int r = 0; r < d1; ++r) H.col(r) = mse.hvp(state.theta, Vec::Unit(d1, r));
  }

  rep.theta.resize(n, d1);
  rep.first.resize(n);
  rep.mse.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto [q, m] = moment_eval(state, data[i]);
    rep.theta.row(i) = (C * q - A * m).transpose();
    rep.first[i] = rep.phi_adjoint.dot(q) - rep.theta_adjoint.dot(m);
    rep.mse[i] = rep.first[i];
    if (cfg.order == 2) {
      Vec it = rep.theta.row(i).transpose();
      rep.mse[i] += 0.5 * rep.epsilon * it.dot(H * it);
    }
  }
  rep.loo_delta = -rep.epsilon * rep.mse;
  rep.cg_iterations = s.iterations;
  return rep;
}

DenseJacobians dense_jacobians(const EstimatorState& state, std::span<const Sample> data) {
  check_state(state, data);
  const MomentModel& mm = *state.model;
  const int d1 = mm.theta_dim(), d2 = mm.phi_dim();
  DenseJacobians J{Mat(d2, d2), Mat(d1, d1), Mat(d1, d2)};
  for (int c = 0; c < d2; ++c) {
    Vec e = Vec::Unit(d2, c);
    J.q_phi.col(c) = mm.jvp_q_phi(data, state.phi, e);
    J.m_phi.col(c) = mm.jvp_m_phi(data, state.theta, state.phi, e);
  }
  for (int c = 0; c < d1; ++c)
    J.m_theta.col(c) = mm.jvp_m_theta(data, state.theta, state.phi, Vec::Unit(d1, c));
  return J;
}

DenseJacobians dense_jacobians_2sls(const TwoStageLsConfig& cfg, const EstimatorState& state,
                                    std::span<const Sample> data) {
  check_state(state, data);
  // b(t) = c0 + c1 t
  Vec c0, c1;
  switch (cfg.basis) {
    case OutcomeBasis::treatment: c0 = Vec{{0.0}}; c1 = Vec{{1.0}}; break;
    case OutcomeBasis::treatment_control: c0 = Vec{{0.0, 1.0}}; c1 = Vec{{1.0, -1.0}}; break;
    case OutcomeBasis::treatment_intercept: c0 = Vec{{0.0, 1.0}}; c1 = Vec{{1.0, 0.0}}; break;
  }
  const int d1 = static_cast<int>(c0.size());
  const int d2 = static_cast<int>(state.phi.size());
  DenseJacobians J{Mat::Zero(d2, d2), Mat::Zero(d1, d1), Mat::Zero(d1, d2)};
  double c1theta = c1.dot(state.theta);
  for (const auto& s : data) {
    Vec w = instrument_features(cfg, s.z);
    double t = w.dot(state.phi);
    Vec b = c0 + c1 * t;
    double r = b.dot(state.theta) - s.y;
    J.q_phi += 2.0 * w * w.transpose();
    J.m_theta += 2.0 * b * b.transpose();
    J.m_phi += 2.0 * (c1 * r + b * c1theta) * w.transpose();
  }
  double inv = 1.0 / static_cast<double>(data.size());
  J.q_phi *= inv;
  J.m_theta *= inv;
  J.m_phi *= inv;
  return J;
}

}  // namespace dia
