#include "dia/estimators.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "dia/dual.hpp"
#include "dia/errors.hpp"
#include "dia/rng.hpp"

namespace dia {

std::string_view to_string(EstimatorFamily f) {
  switch (f) {
    case EstimatorFamily::twostage_ls: return "twostage_ls";
    case EstimatorFamily::logistic_civ: return "logistic_civ";
    case EstimatorFamily::neural_civ: return "neural_civ";
  }
  return "?";
}

EstimatorFamily parse_estimator_family(std::string_view s) {
  if (s == "twostage_ls") return EstimatorFamily::twostage_ls;
  if (s == "logistic_civ") return EstimatorFamily::logistic_civ;
  if (s == "neural_civ") return EstimatorFamily::neural_civ;
  throw ConfigError("unknown estimator family: " + std::string(s));
}

std::string_view to_string(OutcomeBasis b) {
  switch (b) {
    case OutcomeBasis::treatment: return "treatment";
    case OutcomeBasis::treatment_control: return "treatment_control";
    case OutcomeBasis::treatment_intercept: return "treatment_intercept";
  }
  return "?";
}

OutcomeBasis parse_outcome_basis(std::string_view s) {
  if (s == "treatment") return OutcomeBasis::treatment;
  if (s == "treatment_control") return OutcomeBasis::treatment_control;
  if (s == "treatment_intercept") return OutcomeBasis::treatment_intercept;
  throw ConfigError("unknown outcome basis: " + std::string(s));
}

std::string_view to_string(InstrumentEncoding e) {
  return e == InstrumentEncoding::one_hot ? "one_hot" : "index";
}

InstrumentEncoding parse_instrument_encoding(std::string_view s) {
  if (s == "one_hot") return InstrumentEncoding::one_hot;
  if (s == "index") return InstrumentEncoding::index;
  throw ConfigError("unknown instrument encoding: " + std::string(s));
}

namespace {

constexpr int kMaxWidth = 64;

double sup_norm(const Vec& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

// ---------------------------------------------------------------- kernels --
//
// A kernel provides per-sample templated evaluations:
//   q(s, phi, out)                      stage-one moment
//   m(s, theta, phi, g_theta, g_phi)    grad_theta L2 and (optionally) grad_phi L2
//   predict(theta, x, a, grad)          f and (optionally) grad_theta f

struct LinearBasis {
  std::array<double, 2> c0{}, c1{};
  int d = 0;

  explicit LinearBasis(OutcomeBasis b) {
    switch (b) {
      case OutcomeBasis::treatment: d = 1; c0 = {0, 0}; c1 = {1, 0}; break;
      case OutcomeBasis::treatment_control: d = 2; c0 = {0, 1}; c1 = {1, -1}; break;
      case OutcomeBasis::treatment_intercept: d = 2; c0 = {0, 1}; c1 = {1, 0}; break;
    }
  }
  Vec c0v() const { return Eigen::Map<const Vec>(c0.data(), d); }
  Vec c1v() const { return Eigen::Map<const Vec>(c1.data(), d); }
};

struct TslsKernel {
  TwoStageLsConfig cfg;
  LinearBasis basis;
  int p;

  explicit TslsKernel(const TwoStageLsConfig& c)
      : cfg(c), basis(c.basis), p(c.encoding == InstrumentEncoding::one_hot ? c.num_instruments : 1) {
    if (c.num_instruments < 1) throw ConfigError("twostage_ls needs >= 1 instrument");
  }

  EstimatorFamily family() const { return EstimatorFamily::twostage_ls; }
  int theta_dim() const { return basis.d; }
  int phi_dim() const { return p; }

  void check(const Sample& s) const {
    if (s.z < 0 || s.z >= cfg.num_instruments) throw ConfigError("instrument out of range");
  }

  // t = w' phi; returns the single nonzero index for one-hot (or 0) and w there.
  template <class T>
  T fitted(const Sample& s, const T* phi, int& j, double& w) const {
    check(s);
    if (cfg.encoding == InstrumentEncoding::one_hot) {
      j = s.z;
      w = 1.0;
    } else {
      j = 0;
      w = s.z - cfg.index_offset;
    }
    return phi[j] * w;
  }

  template <class T>
  void q(const Sample& s, const T* phi, T* out) const {
    int j;
    double w;
    T t = fitted(s, phi, j, w);
    for (int i = 0; i < p; ++i) out[i] = T(0.0);
    out[j] = T(2.0 * w) * (t - T(s.a));
  }

  template <class T>
  void m(const Sample& s, const T* theta, const T* phi, T* gt, T* gp) const {
    int j;
    double w;
    T t = fitted(s, phi, j, w);
    const int d = basis.d;
    T r = T(-s.y);
    std::array<T, 2> b;
    for (int k = 0; k < d; ++k) {
      b[k] = T(basis.c0[k]) + T(basis.c1[k]) * t;
      r += b[k] * theta[k];
    }
    for (int k = 0; k < d; ++k) gt[k] = T(2.0) * b[k] * r;
    if (gp) {
      T c1theta = T(0.0);
      for (int k = 0; k < d; ++k) c1theta += T(basis.c1[k]) * theta[k];
      for (int i = 0; i < p; ++i) gp[i] = T(0.0);
      gp[j] = T(2.0 * w) * r * c1theta;
    }
  }

  template <class T>
  T predict(const T* theta, const Vec&, double a, T* grad) const {
    T f = T(0.0);
    for (int k = 0; k < basis.d; ++k) {
      double bk = basis.c0[k] + basis.c1[k] * a;
      f += T(bk) * theta[k];
      if (grad) grad[k] = T(bk);
    }
    return f;
  }

  std::pair<Vec, Vec> init() const { return {Vec::Zero(basis.d), Vec::Zero(p)}; }
};

double covariate(const Vec& x, int i) { return x.size() > i ? x[i] : 0.0; }

// Density dP(A=1 | x, z; phi) = sigmoid(phi_z + x1 * phi_{m+z});
// outcome f(x, a) = c_x * x2 + c_a * a.
struct LogisticKernel {
  LogisticCivConfig cfg;
  int nz;

  explicit LogisticKernel(const LogisticCivConfig& c) : cfg(c), nz(c.num_instruments) {
    if (nz < 1) throw ConfigError("logistic_civ needs >= 1 instrument");
    if (c.ridge < 0) throw ConfigError("negative ridge");
  }

  EstimatorFamily family() const { return EstimatorFamily::logistic_civ; }
  int theta_dim() const { return 2; }
  int phi_dim() const { return 2 * nz; }

  template <class T>
  T density(const Sample& s, const T* phi) const {
    if (s.z < 0 || s.z >= nz) throw ConfigError("instrument out of range");
    return sigmoid(phi[s.z] + T(covariate(s.x, 0)) * phi[nz + s.z]);
  }

  template <class T>
  void q(const Sample& s, const T* phi, T* out) const {
    T pr = density(s, phi);
    for (int i = 0; i < 2 * nz; ++i) out[i] = T(cfg.ridge) * phi[i];
    T e = pr - T(s.a);
    out[s.z] += e;
    out[nz + s.z] += e * T(covariate(s.x, 0));
  }

  template <class T>
  void m(const Sample& s, const T* theta, const T* phi, T* gt, T* gp) const {
    T pr = density(s, phi);
    double x2 = covariate(s.x, 1);
    T r = T(s.y) - theta[0] * T(x2) - theta[1] * pr;
    gt[0] = T(-2.0 * x2) * r;
    gt[1] = T(-2.0) * r * pr;
    if (gp) {
      for (int i = 0; i < 2 * nz; ++i) gp[i] = T(0.0);
      T c = T(-2.0) * r * theta[1] * pr * (T(1.0) - pr);
      gp[s.z] = c;
      gp[nz + s.z] = c * T(covariate(s.x, 0));
    }
  }

  template <class T>
  T predict(const T* theta, const Vec& x, double a, T* grad) const {
    double x2 = covariate(x, 1);
    if (grad) {
      grad[0] = T(x2);
      grad[1] = T(a);
    }
    return theta[0] * T(x2) + theta[1] * T(a);
  }

  std::pair<Vec, Vec> init() const { return {Vec::Zero(2), Vec::Zero(2 * nz)}; }
};

// Scalar-output network: in -> H sigmoid -> 1.
// Layout [W1 (H x I, row-major), b1 (H), w2 (H), b2].
struct ScalarMlp {
  int I = 0, H = 0;
  int size() const { return H * I + 2 * H + 1; }

  template <class T>
  T forward(const T* w, const double* in, T* h) const {
    const T* b1 = w + H * I;
    const T* w2 = b1 + H;
    T out = w2[H];
    for (int j = 0; j < H; ++j) {
      T pre = b1[j];
      for (int k = 0; k < I; ++k) pre += w[j * I + k] * T(in[k]);
      h[j] = sigmoid(pre);
      out += w2[j] * h[j];
    }
    return out;
  }

  // grad += g * d(out)/dw
  template <class T>
  void backward(const T* w, const double* in, const T* h, T g, T* grad) const {
    const T* w2 = w + H * I + H;
    T* gb1 = grad + H * I;
    T* gw2 = gb1 + H;
    gw2[H] += g;
    for (int j = 0; j < H; ++j) {
      gw2[j] += g * h[j];
      T dpre = g * w2[j] * h[j] * (T(1.0) - h[j]);
      gb1[j] += dpre;
      for (int k = 0; k < I; ++k) grad[j * I + k] += dpre * T(in[k]);
    }
  }

  Vec init(Rng& rng) const {
    Vec w = Vec::Zero(size());
    double s1 = 1.0 / std::sqrt(static_cast<double>(std::max(I, 1)));
    double s2 = 1.0 / std::sqrt(static_cast<double>(H));
    for (int i = 0; i < H * I; ++i) w[i] = rng.normal() * s1;
    for (int j = 0; j < H; ++j) w[H * I + H + j] = rng.normal() * s2;
    return w;
  }
};

// f(x, a) = MLP([x, a]); density sigmoid(MLP([x, onehot(z)])).
struct NeuralKernel {
  NeuralCivConfig cfg;
  ScalarMlp fnet, dnet;

  explicit NeuralKernel(const NeuralCivConfig& c) : cfg(c) {
    if (c.num_instruments < 1 || c.covariate_dim < 0) throw ConfigError("bad neural_civ shape");
    if (c.hidden < 1 || c.hidden > kMaxWidth) throw ConfigError("neural_civ hidden size out of range");
    if (c.covariate_dim + c.num_instruments > kMaxWidth) throw ConfigError("neural_civ input too wide");
    fnet = {c.covariate_dim + 1, c.hidden};
    dnet = {c.covariate_dim + c.num_instruments, c.hidden};
  }

  EstimatorFamily family() const { return EstimatorFamily::neural_civ; }
  int theta_dim() const { return fnet.size(); }
  int phi_dim() const { return dnet.size(); }

  void f_input(const Vec& x, double a, double* in) const {
    if (x.size() != cfg.covariate_dim) throw ConfigError("covariate dimension mismatch");
    for (int k = 0; k < cfg.covariate_dim; ++k) in[k] = x[k];
    in[cfg.covariate_dim] = a;
  }
  void d_input(const Sample& s, double* in) const {
    if (s.x.size() != cfg.covariate_dim) throw ConfigError("covariate dimension mismatch");
    if (s.z < 0 || s.z >= cfg.num_instruments) throw ConfigError("instrument out of range");
    for (int k = 0; k < cfg.covariate_dim; ++k) in[k] = s.x[k];
    for (int k = 0; k < cfg.num_instruments; ++k) in[cfg.covariate_dim + k] = k == s.z ? 1.0 : 0.0;
  }

  template <class T>
  void q(const Sample& s, const T* phi, T* out) const {
    double in[kMaxWidth];
    T h[kMaxWidth];
    d_input(s, in);
    T pr = sigmoid(dnet.forward(phi, in, h));
    for (int i = 0; i < dnet.size(); ++i) out[i] = T(cfg.ridge) * phi[i];
    dnet.backward(phi, in, h, pr - T(s.a), out);
  }

  template <class T>
  void m(const Sample& s, const T* theta, const T* phi, T* gt, T* gp) const {
    double din[kMaxWidth], fin0[kMaxWidth], fin1[kMaxWidth];
    T hd[kMaxWidth], h0[kMaxWidth], h1[kMaxWidth];
    d_input(s, din);
    f_input(s.x, 0.0, fin0);
    f_input(s.x, 1.0, fin1);
    T pr = sigmoid(dnet.forward(phi, din, hd));
    T f0 = fnet.forward(theta, fin0, h0);
    T f1 = fnet.forward(theta, fin1, h1);
    T r = T(s.y) - (f0 * (T(1.0) - pr) + f1 * pr);
    for (int i = 0; i < fnet.size(); ++i) gt[i] = T(0.0);
    fnet.backward(theta, fin0, h0, T(-2.0) * r * (T(1.0) - pr), gt);
    fnet.backward(theta, fin1, h1, T(-2.0) * r * pr, gt);
    if (gp) {
      for (int i = 0; i < dnet.size(); ++i) gp[i] = T(0.0);
      dnet.backward(phi, din, hd, T(-2.0) * r * (f1 - f0) * pr * (T(1.0) - pr), gp);
    }
  }

  template <class T>
  T predict(const T* theta, const Vec& x, double a, T* grad) const {
    double in[kMaxWidth];
    T h[kMaxWidth];
    f_input(x, a, in);
    T f = fnet.forward(theta, in, h);
    if (grad) {
      for (int i = 0; i < fnet.size(); ++i) grad[i] = T(0.0);
      fnet.backward(theta, in, h, T(1.0), grad);
    }
    return f;
  }

  std::pair<Vec, Vec> init() const {
    Rng rng(cfg.init_seed);
    Rng rf = rng.split(0), rd = rng.split(1);
    return {fnet.init(rf), dnet.init(rd)};
  }
};

// ------------------------------------------------------------ model glue --

std::vector<Dual> duals(const Vec& v, const Vec* tangent) {
  std::vector<Dual> out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) out[i] = Dual(v[i], tangent ? (*tangent)[i] : 0.0);
  return out;
}

template <class K>
class KernelModel final : public MomentModel {
 public:
  explicit KernelModel(K k) : k_(std::move(k)) {}

  EstimatorFamily family() const override { return k_.family(); }
  int theta_dim() const override { return k_.theta_dim(); }
  int phi_dim() const override { return k_.phi_dim(); }

  Vec q(const Sample& s, const Vec& phi) const override {
    check_phi(phi);
    Vec out(phi_dim());
    k_.template q<double>(s, phi.data(), out.data());
    return out;
  }

  Vec m(const Sample& s, const Vec& theta, const Vec& phi) const override {
    check_theta(theta);
    check_phi(phi);
    Vec out(theta_dim());
    k_.template m<double>(s, theta.data(), phi.data(), out.data(), nullptr);
    return out;
  }

  Vec Q(std::span<const Sample> data, const Vec& phi) const override {
    check_phi(phi);
    nonempty(data);
    Vec acc = Vec::Zero(phi_dim()), buf(phi_dim());
    for (const auto& s : data) {
      k_.template q<double>(s, phi.data(), buf.data());
      acc += buf;
    }
    return acc / static_cast<double>(data.size());
  }

  Vec M(std::span<const Sample> data, const Vec& theta, const Vec& phi) const override {
    check_theta(theta);
    check_phi(phi);
    nonempty(data);
    Vec acc = Vec::Zero(theta_dim()), buf(theta_dim());
    for (const auto& s : data) {
      k_.template m<double>(s, theta.data(), phi.data(), buf.data(), nullptr);
      acc += buf;
    }
    return acc / static_cast<double>(data.size());
  }

  Vec jvp_q_phi(std::span<const Sample> data, const Vec& phi, const Vec& v) const override {
    check_phi(phi);
    check_phi(v);
    nonempty(data);
    auto ph = duals(phi, &v);
    std::vector<Dual> buf(phi_dim());
    Vec acc = Vec::Zero(phi_dim());
    for (const auto& s : data) {
      k_.template q<Dual>(s, ph.data(), buf.data());
      for (int i = 0; i < phi_dim(); ++i) acc[i] += buf[i].d;
    }
    return acc / static_cast<double>(data.size());
  }

  Vec jvp_m_theta(std::span<const Sample> data, const Vec& theta, const Vec& phi,
                  const Vec& v) const override {
    check_theta(v);
    return m_tangent(data, theta, phi, &v, nullptr, false);
  }

  Vec jvp_m_phi(std::span<const Sample> data, const Vec& theta, const Vec& phi,
                const Vec& v) const override {
    check_phi(v);
    return m_tangent(data, theta, phi, nullptr, &v, false);
  }

  Vec vjp_m_phi(std::span<const Sample> data, const Vec& theta, const Vec& phi,
                const Vec& u) const override {
    check_theta(u);
    return m_tangent(data, theta, phi, &u, nullptr, true);
  }

  double predict(const Vec& theta, const Vec& x, double a) const override {
    check_theta(theta);
    return k_.template predict<double>(theta.data(), x, a, nullptr);
  }

  Vec predict_grad(const Vec& theta, const Vec& x, double a) const override {
    check_theta(theta);
    Vec g(theta_dim());
    k_.template predict<double>(theta.data(), x, a, g.data());
    return g;
  }

  Vec predict_hvp(const Vec& theta, const Vec& x, double a, const Vec& v) const override {
    check_theta(theta);
    check_theta(v);
    auto th = duals(theta, &v);
    std::vector<Dual> g(theta_dim());
    k_.template predict<Dual>(th.data(), x, a, g.data());
    Vec out(theta_dim());
    for (int i = 0; i < theta_dim(); ++i) out[i] = g[i].d;
    return out;
  }

  std::pair<Vec, Vec> initial_params() const override { return k_.init(); }

 private:
  // Tangent of mean grad_theta L2 (or grad_phi L2 when want_phi) with the
  // dual direction on theta and/or phi.
  Vec m_tangent(std::span<const Sample> data, const Vec& theta, const Vec& phi, const Vec* dtheta,
                const Vec* dphi, bool want_phi) const {
    check_theta(theta);
    check_phi(phi);
    nonempty(data);
    auto th = duals(theta, dtheta);
    auto ph = duals(phi, dphi);
    std::vector<Dual> gt(theta_dim()), gp(phi_dim());
    const int n_out = want_phi ? phi_dim() : theta_dim();
    Vec acc = Vec::Zero(n_out);
    for (const auto& s : data) {
      k_.template m<Dual>(s, th.data(), ph.data(), gt.data(), want_phi ? gp.data() : nullptr);
      const auto& src = want_phi ? gp : gt;
      for (int i = 0; i < n_out; ++i) acc[i] += src[i].d;
    }
    return acc / static_cast<double>(data.size());
  }

  void check_theta(const Vec& v) const {
    if (v.size() != theta_dim()) throw ConfigError("theta dimension mismatch");
  }
  void check_phi(const Vec& v) const {
    if (v.size() != phi_dim()) throw ConfigError("phi dimension mismatch");
  }
  static void nonempty(std::span<const Sample> data) {
    if (data.empty()) throw ConfigError("empty dataset");
  }

  K k_;
};

// --------------------------------------------------------------- solvers --

struct RootResult {
  Vec x;
  double norm;
  int iters;
};

Vec cg_plain(const std::function<Vec(const Vec&)>& A, const Vec& b, int max_iter, double tol) {
  Vec x = Vec::Zero(b.size());
  Vec r = b, p = r;
  double rr = r.squaredNorm();
  double stop = tol * tol * std::max(rr, 1e-300);
  for (int it = 0; it < max_iter && rr > stop; ++it) {
    Vec Ap = A(p);
    double pAp = p.dot(Ap);
    if (!(pAp > 0.0)) break;
    double alpha = rr / pAp;
    x += alpha * p;
    r -= alpha * Ap;
    double rr_new = r.squaredNorm();
    p = r + (rr_new / rr) * p;
    rr = rr_new;
  }
  return x;
}

RootResult solve_root(const std::function<Vec(const Vec&)>& G,
                      const std::function<Vec(const Vec&, const Vec&)>& Jv, Vec x,
                      const FitOptions& o) {
  Vec g = G(x);
  double norm = sup_norm(g);
  int it = 0;
  if (norm > o.tol && o.max_iter > 0) {
    Vec m1 = Vec::Zero(x.size()), m2 = Vec::Zero(x.size());
    double b1t = 1.0, b2t = 1.0;
    for (; it < o.max_iter && norm > o.tol; ++it) {
      b1t *= o.beta1;
      b2t *= o.beta2;
      m1 = o.beta1 * m1 + (1.0 - o.beta1) * g;
      m2 = o.beta2 * m2 + (1.0 - o.beta2) * g.cwiseProduct(g);
      Vec mh = m1 / (1.0 - b1t);
      Vec vh = m2 / (1.0 - b2t);
      x -= o.lr * mh.cwiseQuotient((vh.cwiseSqrt().array() + o.adam_eps).matrix());
      g = G(x);
      norm = sup_norm(g);
      if (!std::isfinite(norm)) break;
    }
  }
  for (int k = 0; k < o.newton_iter && std::isfinite(norm) && norm > 0.0; ++k) {
    auto A = [&](const Vec& v) { return Jv(x, v); };
    Vec step = cg_plain(A, -g, 2 * static_cast<int>(x.size()) + 10, 1e-12);
    bool improved = false;
    for (double s = 1.0; s > 1e-4; s *= 0.5) {
      Vec xn = x + s * step;
      Vec gn = G(xn);
      double nn = sup_norm(gn);
      if (nn < norm) {
        x = std::move(xn);
        g = std::move(gn);
        norm = nn;
        improved = true;
        break;
      }
    }
    ++it;
    if (!improved) break;
  }
  return {std::move(x), norm, it};
}

}  // namespace

std::shared_ptr<const MomentModel> make_twostage_ls(const TwoStageLsConfig& cfg) {
  return std::make_shared<KernelModel<TslsKernel>>(TslsKernel(cfg));
}
std::shared_ptr<const MomentModel> make_logistic_civ(const LogisticCivConfig& cfg) {
  return std::make_shared<KernelModel<LogisticKernel>>(LogisticKernel(cfg));
}
std::shared_ptr<const MomentModel> make_neural_civ(const NeuralCivConfig& cfg) {
  return std::make_shared<KernelModel<NeuralKernel>>(NeuralKernel(cfg));
}

// ------------------------------------------------------------ closed form --

LinearIvStats::LinearIvStats(int p)
    : sw(Vec::Zero(p)), sww(Mat::Zero(p, p)), swa(Vec::Zero(p)), swy(Vec::Zero(p)) {}

void LinearIvStats::add(const Vec& w, double a, double y, double weight) {
  n += weight;
  sw += weight * w;
  sww.noalias() += weight * w * w.transpose();
  swa += (weight * a) * w;
  sy += weight * y;
  swy += (weight * y) * w;
}

Vec instrument_features(const TwoStageLsConfig& cfg, int z) {
  if (z < 0 || z >= cfg.num_instruments) throw ConfigError("instrument out of range");
  if (cfg.encoding == InstrumentEncoding::one_hot) {
    Vec w = Vec::Zero(cfg.num_instruments);
    w[z] = 1.0;
    return w;
  }
  return Vec::Constant(1, z - cfg.index_offset);
}

LinearIvStats linear_iv_stats(const TwoStageLsConfig& cfg, std::span<const Sample> data) {
  const int p = cfg.encoding == InstrumentEncoding::one_hot ? cfg.num_instruments : 1;
  LinearIvStats st(p);
  if (cfg.encoding == InstrumentEncoding::one_hot) {
    // diagonal fast path
    for (const auto& s : data) {
      if (s.z < 0 || s.z >= p) throw ConfigError("instrument out of range");
      st.n += 1.0;
      st.sw[s.z] += 1.0;
      st.sww(s.z, s.z) += 1.0;
      st.swa[s.z] += s.a;
      st.sy += s.y;
      st.swy[s.z] += s.y;
    }
  } else {
    for (const auto& s : data) st.add(instrument_features(cfg, s.z), s.a, s.y);
  }
  return st;
}

namespace {

// Solve S x = b for symmetric PSD S; throws when S is numerically singular.
Vec spd_solve(const Mat& S, const Vec& b, const char* what) {
  Eigen::SelfAdjointEigenSolver<Mat> es(S);
  const Vec& ev = es.eigenvalues();
  double mx = ev.cwiseAbs().maxCoeff();
  if (!(mx > 0.0) || ev.minCoeff() <= 1e-12 * mx)
    throw RankDeficientError(std::string("rank-deficient ") + what);
  return es.eigenvectors() * (es.eigenvectors().transpose() * b).cwiseQuotient(ev);
}

}  // namespace

std::pair<Vec, Vec> solve_2sls(const TwoStageLsConfig& cfg, const LinearIvStats& st) {
  if (!(st.n > 0.0)) throw ConfigError("fit_2sls on empty dataset");
  const int p = static_cast<int>(st.sw.size());
  std::vector<int> live;
  for (int j = 0; j < p; ++j)
    if (st.sww(j, j) > 0.0) live.push_back(j);
  if (live.empty()) throw RankDeficientError("rank-deficient first stage: instrument never varies");
  Vec phi = Vec::Zero(p);
  bool diagonal = cfg.encoding == InstrumentEncoding::one_hot;
  if (diagonal) {
    for (int j : live) phi[j] = st.swa[j] / st.sww(j, j);
  } else {
    const int r = static_cast<int>(live.size());
    Mat S(r, r);
    Vec b(r);
    for (int i = 0; i < r; ++i) {
      b[i] = st.swa[live[i]];
      for (int k = 0; k < r; ++k) S(i, k) = st.sww(live[i], live[k]);
    }
    Vec sol = spd_solve(S, b, "first stage");
    for (int i = 0; i < r; ++i) phi[live[i]] = sol[i];
  }
  LinearBasis basis(cfg.basis);
  Vec c0 = basis.c0v(), c1 = basis.c1v();
  double s1 = st.sw.dot(phi);
  double s2 = phi.dot(st.sww * phi);
  Mat G = st.n * c0 * c0.transpose() + s1 * (c0 * c1.transpose() + c1 * c0.transpose()) +
          s2 * c1 * c1.transpose();
  Vec rhs = st.sy * c0 + phi.dot(st.swy) * c1;
  Vec theta = spd_solve(G, rhs, "second stage");
  return {std::move(theta), std::move(phi)};
}

EstimatorState fit_2sls(std::span<const Sample> data, const TwoStageLsConfig& cfg) {
  if (data.empty()) throw ConfigError("fit_2sls on empty dataset");
  auto [theta, phi] = solve_2sls(cfg, linear_iv_stats(cfg, data));
  EstimatorState st;
  st.model = make_twostage_ls(cfg);
  st.theta = std::move(theta);
  st.phi = std::move(phi);
  st.diag.closed_form = true;
  st.diag.q_norm = sup_norm(st.model->Q(data, st.phi));
  st.diag.m_norm = sup_norm(st.model->M(data, st.theta, st.phi));
  return st;
}

Mat loo_thetas_2sls(std::span<const Sample> data, const TwoStageLsConfig& cfg) {
  LinearIvStats full = linear_iv_stats(cfg, data);
  LinearBasis basis(cfg.basis);
  Mat out(data.size(), basis.d);
  for (std::size_t i = 0; i < data.size(); ++i) {
    LinearIvStats st = full;
    st.add(instrument_features(cfg, data[i].z), data[i].a, data[i].y, -1.0);
    // keep the removed column exactly empty instead of a 1e-17 residue
    for (Eigen::Index j = 0; j < st.sww.rows(); ++j)
      if (std::abs(st.sww(j, j)) < 0.5 && cfg.encoding == InstrumentEncoding::one_hot) {
        st.sww(j, j) = 0.0;
        st.swa[j] = 0.0;
        st.swy[j] = 0.0;
        st.sw[j] = 0.0;
      }
    try {
      out.row(i) = solve_2sls(cfg, st).first.transpose();
    } catch (const RankDeficientError&) {
      out.row(i).setConstant(std::numeric_limits<double>::quiet_NaN());
    }
  }
  return out;
}

// -------------------------------------------------------------- gradient --

EstimatorState fit_two_stage(std::shared_ptr<const MomentModel> model, std::span<const Sample> data,
                             const EstimatorState* init, const FitOptions& opts) {
  if (!model) throw ConfigError("null moment model");
  if (data.empty()) throw ConfigError("fit on empty dataset");
  Vec theta0, phi0;
  if (init && init->theta.size() == model->theta_dim() && init->phi.size() == model->phi_dim()) {
    theta0 = init->theta;
    phi0 = init->phi;
  } else {
    std::tie(theta0, phi0) = model->initial_params();
  }
  const MomentModel& mm = *model;
  auto r1 = solve_root([&](const Vec& ph) { return mm.Q(data, ph); },
                       [&](const Vec& ph, const Vec& v) { return mm.jvp_q_phi(data, ph, v); },
                       std::move(phi0), opts);
  const Vec& phi = r1.x;
  auto r2 = solve_root([&](const Vec& th) { return mm.M(data, th, phi); },
                       [&](const Vec& th, const Vec& v) { return mm.jvp_m_theta(data, th, phi, v); },
                       std::move(theta0), opts);
  EstimatorState st;
  st.model = std::move(model);
  st.phi = r1.x;
  st.theta = r2.x;
  st.diag.q_norm = r1.norm;
  st.diag.m_norm = r2.norm;
  st.diag.stage1_iters = r1.iters;
  st.diag.stage2_iters = r2.iters;
  st.diag.converged = r1.norm <= opts.tol && r2.norm <= opts.tol;
  return st;
}

std::shared_ptr<const MomentModel> EstimatorSpec::make_model() const {
  switch (family) {
    case EstimatorFamily::twostage_ls: return make_twostage_ls(tsls);
    case EstimatorFamily::logistic_civ: return make_logistic_civ(logistic);
    case EstimatorFamily::neural_civ: return make_neural_civ(neural);
  }
  return nullptr;
}

EstimatorSpec default_estimator(const DgpInstance& dgp) {
  EstimatorSpec s;
  const int m = dgp.num_instruments();
  switch (dgp.kind()) {
    case DgpKind::iv:
    case DgpKind::binary_confounded:
      s.family = EstimatorFamily::twostage_ls;
      s.tsls = {m, InstrumentEncoding::one_hot, 0.0, OutcomeBasis::treatment_control};
      break;
    case DgpKind::misspec:
      s.family = EstimatorFamily::twostage_ls;
      s.tsls = {m, InstrumentEncoding::one_hot, 0.0, OutcomeBasis::treatment_intercept};
      break;
    case DgpKind::civ:
      s.family = EstimatorFamily::logistic_civ;
      s.logistic.num_instruments = m;
      break;
  }
  s.neural.num_instruments = m;
  s.neural.covariate_dim = dgp.covariate_dim();
  return s;
}

EstimatorState fit_estimator(const EstimatorSpec& spec, std::span<const Sample> data,
                             const EstimatorState* warm) {
  if (spec.closed_form()) return fit_2sls(data, spec.tsls);
  return fit_two_stage(spec.make_model(), data, warm, spec.fit);
}

double predict_f(const EstimatorState& state, const Vec& x, double a) {
  return state.model->predict(state.theta, x, a);
}

double proxy_mse(const EstimatorState& sub, const EstimatorState& full, const EvalSet& eval) {
  if (eval.empty()) throw ConfigError("empty eval set");
  if (sub.model->family() != full.model->family()) throw ConfigError("proxy_mse across families");
  double s = 0.0;
  for (const auto& p : eval.points()) {
    double d = full.model->predict(full.theta, p.x, p.a) - sub.model->predict(sub.theta, p.x, p.a);
    s += d * d;
  }
  return s / static_cast<double>(eval.size());
}

double true_mse(const DgpInstance& dgp, const EstimatorState& state, const EvalSet& eval) {
  return true_mse(
      dgp, [&](const Vec& x, double a) { return state.model->predict(state.theta, x, a); }, eval);
}

std::pair<Vec, Vec> moment_eval(const EstimatorState& state, const Sample& s) {
  return {state.model->q(s, state.phi), state.model->m(s, state.theta, state.phi)};
}

}  // namespace dia
