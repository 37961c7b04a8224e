#include "dia/policy.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "dia/errors.hpp"

namespace dia {

std::string_view to_string(PolicyForm f) {
  switch (f) {
    case PolicyForm::softmax_logits: return "softmax_logits";
    case PolicyForm::conditional_mlp: return "conditional_mlp";
    case PolicyForm::mixture: return "mixture";
  }
  return "?";
}

PolicyForm parse_policy_form(std::string_view s) {
  if (s == "softmax_logits") return PolicyForm::softmax_logits;
  if (s == "conditional_mlp") return PolicyForm::conditional_mlp;
  if (s == "mixture") return PolicyForm::mixture;
  throw ConfigError("unknown policy form: " + std::string(s));
}

Vec softmax_probs(const Vec& logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double l : logits) mx = std::max(mx, l);
  if (!std::isfinite(mx)) throw ConfigError("softmax: no finite logit");
  Vec p(logits.size());
  double s = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    s += p[i];
  }
  return p / s;
}

namespace {
double sigmoid(double t) { return 1.0 / (1.0 + std::exp(-t)); }
}  // namespace

Policy Policy::uniform(int num_instruments, int input_dim) {
  return softmax(Vec::Zero(num_instruments), input_dim);
}

Policy Policy::softmax(Vec logits, int input_dim) {
  if (logits.size() < 1) throw ConfigError("policy needs at least one instrument");
  if (input_dim < 0) throw ConfigError("negative input dimension");
  Policy p;
  p.form_ = PolicyForm::softmax_logits;
  p.m_ = static_cast<int>(logits.size());
  p.d_ = input_dim;
  p.w_ = std::move(logits);
  return p;
}

Policy Policy::mlp(int input_dim, int num_instruments, Rng& rng, int hidden) {
  if (input_dim < 0 || num_instruments < 1 || hidden < 1) throw ConfigError("bad MLP policy shape");
  int n = hidden * input_dim + hidden + num_instruments * hidden + num_instruments;
  Vec w = Vec::Zero(n);
  int o = 0;
  double s1 = input_dim > 0 ? 1.0 / std::sqrt(static_cast<double>(input_dim)) : 0.0;
  for (int i = 0; i < hidden * input_dim; ++i) w[o++] = rng.normal() * s1;
  o += hidden;
  double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (int i = 0; i < num_instruments * hidden; ++i) w[o++] = rng.normal() * s2;
  return mlp_from_weights(input_dim, hidden, num_instruments, std::move(w));
}

Policy Policy::mlp_from_weights(int input_dim, int hidden, int num_instruments, Vec weights) {
  if (input_dim < 0 || num_instruments < 1 || hidden < 1) throw ConfigError("bad MLP policy shape");
  int n = hidden * input_dim + hidden + num_instruments * hidden + num_instruments;
  if (weights.size() != n) throw ConfigError("MLP weight vector has wrong length");
  Policy p;
  p.form_ = PolicyForm::conditional_mlp;
  p.m_ = num_instruments;
  p.d_ = input_dim;
  p.hidden_ = hidden;
  p.w_ = std::move(weights);
  return p;
}

Policy Policy::mixture(std::vector<Component> fixed, double learnable_weight, Policy learnable) {
  if (learnable_weight < 0.0 || learnable_weight > 1.0) throw ConfigError("mixture weight outside [0,1]");
  double total = learnable_weight;
  for (const auto& c : fixed) {
    if (!c.policy) throw ConfigError("null mixture component");
    if (c.weight < 0.0) throw ConfigError("negative mixture weight");
    if (c.policy->num_instruments() != learnable.num_instruments() ||
        c.policy->input_dim() != learnable.input_dim())
      throw ConfigError("mixture components disagree on shape");
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("mixture weights must sum to 1");
  Policy p;
  p.form_ = PolicyForm::mixture;
  p.m_ = learnable.num_instruments();
  p.d_ = learnable.input_dim();
  p.fixed_ = std::move(fixed);
  p.lambda_ = learnable_weight;
  p.learnable_ = std::make_shared<const Policy>(std::move(learnable));
  return p;
}

const Vec& Policy::weights() const {
  return form_ == PolicyForm::mixture ? learnable_->weights() : w_;
}

Policy Policy::with_weights(Vec w) const {
  if (w.size() != weights().size()) throw ConfigError("weight length mismatch");
  Policy p = *this;
  if (form_ == PolicyForm::mixture)
    p.learnable_ = std::make_shared<const Policy>(learnable_->with_weights(std::move(w)));
  else
    p.w_ = std::move(w);
  return p;
}

void Policy::check_x(const Vec& x) const {
  if (x.size() != d_)
    throw ConfigError("policy input dimension " + std::to_string(d_) + ", got " +
                      std::to_string(x.size()));
}

Vec Policy::mlp_logits(const Vec& x, Vec* hidden_out) const {
  const int H = hidden_, d = d_;
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W1(
      w_.data(), H, d);
  Eigen::Map<const Vec> b1(w_.data() + H * d, H);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W2(
      w_.data() + H * d + H, m_, H);
  Eigen::Map<const Vec> b2(w_.data() + H * d + H + m_ * H, m_);
  Vec h = (W1 * x + b1).unaryExpr([](double t) { return sigmoid(t); });
  Vec logits = W2 * h + b2;
  if (hidden_out) *hidden_out = std::move(h);
  return logits;
}

Vec Policy::eval_probs(const Vec& x) const {
  check_x(x);
  switch (form_) {
    case PolicyForm::softmax_logits:
      return softmax_probs(w_);
    case PolicyForm::conditional_mlp:
      return softmax_probs(mlp_logits(x, nullptr));
    case PolicyForm::mixture: {
      Vec p = lambda_ * learnable_->eval_probs(x);
      for (const auto& c : fixed_)
        if (c.weight > 0.0) p += c.weight * c.policy->eval_probs(x);
      return p;
    }
  }
  return {};
}

Vec Policy::prob_grad(const Vec& x, int z) const {
  check_x(x);
  if (z < 0 || z >= m_) throw ConfigError("instrument index out of range");
  if (form_ == PolicyForm::mixture) return lambda_ * learnable_->prob_grad(x, z);
  double pz = eval_probs(x)[z];
  if (pz == 0.0) return Vec::Zero(w_.size());
  return pz * log_prob_grad(x, z);
}

Vec Policy::log_prob_grad(const Vec& x, int z) const {
  check_x(x);
  if (z < 0 || z >= m_) throw ConfigError("instrument index out of range");
  switch (form_) {
    case PolicyForm::softmax_logits: {
      Vec p = softmax_probs(w_);
      if (p[z] == 0.0) throw SupportError("log_prob_grad at zero-probability instrument");
      Vec g = -p;
      g[z] += 1.0;
      return g;
    }
    case PolicyForm::conditional_mlp: {
      Vec h;
      Vec p = softmax_probs(mlp_logits(x, &h));
      if (p[z] == 0.0) throw SupportError("log_prob_grad at zero-probability instrument");
      Vec dl = -p;
      dl[z] += 1.0;
      const int H = hidden_, d = d_;
      Vec g(w_.size());
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> W2(
          w_.data() + H * d + H, m_, H);
      Vec dpre = (W2.transpose() * dl).cwiseProduct(h.cwiseProduct(Vec::Ones(H) - h));
      int o = 0;
      for (int j = 0; j < H; ++j)
        for (int k = 0; k < d; ++k) g[o++] = dpre[j] * x[k];
      for (int j = 0; j < H; ++j) g[o++] = dpre[j];
      for (int c = 0; c < m_; ++c)
        for (int j = 0; j < H; ++j) g[o++] = dl[c] * h[j];
      for (int c = 0; c < m_; ++c) g[o++] = dl[c];
      return g;
    }
    case PolicyForm::mixture: {
      double pz = eval_probs(x)[z];
      if (pz == 0.0) throw SupportError("log_prob_grad at zero-probability instrument");
      if (lambda_ == 0.0) return Vec::Zero(weights().size());
      return lambda_ * learnable_->prob_grad(x, z) / pz;
    }
  }
  return {};
}

int PolicyRegistry::add(Policy p, long count) {
  return add(std::make_shared<const Policy>(std::move(p)), count);
}

int PolicyRegistry::add(std::shared_ptr<const Policy> p, long count) {
  if (count < 1) throw ConfigError("registry count must be >= 1");
  if (!p) throw ConfigError("null policy");
  if (!entries_.empty() && (p->num_instruments() != entries_[0].policy->num_instruments() ||
                            p->input_dim() != entries_[0].policy->input_dim()))
    throw ConfigError("registered policy shape differs from registry");
  entries_.push_back({std::move(p), count});
  total_ += count;
  return static_cast<int>(entries_.size()) - 1;
}

void PolicyRegistry::add_count(int id, long extra) {
  if (id < 0 || id >= size()) throw ConfigError("unregistered policy id");
  if (extra < 0) throw ConfigError("negative count");
  entries_[id].count += extra;
  total_ += extra;
}

const Policy& PolicyRegistry::policy(int id) const { return *policy_ptr(id); }

std::shared_ptr<const Policy> PolicyRegistry::policy_ptr(int id) const {
  if (id < 0 || id >= size()) throw ConfigError("unregistered policy id " + std::to_string(id));
  return entries_[id].policy;
}

long PolicyRegistry::count(int id) const {
  if (id < 0 || id >= size()) throw ConfigError("unregistered policy id");
  return entries_[id].count;
}

Vec PolicyRegistry::average_probs(const Vec& x) const {
  if (entries_.empty()) throw ConfigError("average_propensity on empty registry");
  Vec p = Vec::Zero(entries_[0].policy->num_instruments());
  for (const auto& e : entries_) p += static_cast<double>(e.count) * e.policy->eval_probs(x);
  return p / static_cast<double>(total_);
}

double PolicyRegistry::average_propensity(const Vec& x, int z) const { return average_probs(x)[z]; }

Policy effective_policy(const PolicyRegistry& registry, const Policy& learnable, long n, long N) {
  if (n < 0 || N <= 0 || n > N) throw ConfigError("effective_policy needs 0 <= n <= N, N > 0");
  if (n > 0 && registry.total_count() != n)
    throw ConfigError("registry counts do not sum to n");
  if (n == 0) return Policy::mixture({}, 1.0, learnable);
  double past = static_cast<double>(n) / static_cast<double>(N);
  std::vector<Policy::Component> fixed;
  for (const auto& e : registry.entries())
    fixed.push_back({past * static_cast<double>(e.count) / static_cast<double>(n), e.policy});
  // absorb rounding so the weights sum to exactly one
  double lam = 1.0 - past;
  double sum = lam;
  for (const auto& c : fixed) sum += c.weight;
  lam += 1.0 - sum;
  return Policy::mixture(std::move(fixed), std::clamp(lam, 0.0, 1.0), learnable);
}

}  // namespace dia
