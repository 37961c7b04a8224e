#pragma once

#include <memory>
#include <string_view>
#include <vector>

#include "dia/rng.hpp"
#include "dia/types.hpp"

namespace dia {

enum class PolicyForm { softmax_logits, conditional_mlp, mixture };

std::string_view to_string(PolicyForm f);
PolicyForm parse_policy_form(std::string_view s);

// Instrument-sampling distribution pi_w(z | x). Immutable value type; weights
// w are the learnable parameters (logits, flat MLP weights, or the learnable
// component of a mixture).
class Policy {
 public:
  struct Component {
    double weight;
    std::shared_ptr<const Policy> policy;
  };

  static Policy uniform(int num_instruments, int input_dim = 0);
  // Logits may be -inf to express exact zeros.
  static Policy softmax(Vec logits, int input_dim = 0);
  // Hidden sigmoid layer; weights ~ N(0, 1/fan_in), biases zero.
  static Policy mlp(int input_dim, int num_instruments, Rng& rng, int hidden = 8);
  // Flat layout [W1 (hidden x input, row-major), b1, W2 (m x hidden, row-major), b2].
  static Policy mlp_from_weights(int input_dim, int hidden, int num_instruments, Vec weights);
  static Policy mixture(std::vector<Component> fixed, double learnable_weight, Policy learnable);

  PolicyForm form() const { return form_; }
  int num_instruments() const { return m_; }
  int input_dim() const { return d_; }
  int hidden() const { return hidden_; }
  const Vec& weights() const;
  Policy with_weights(Vec w) const;

  Vec eval_probs(const Vec& x) const;
  double prob(const Vec& x, int z) const { return eval_probs(x)[z]; }
  // Gradient of log pi_w(z|x) with respect to weights(); throws SupportError
  // when pi(z|x) == 0.
  Vec log_prob_grad(const Vec& x, int z) const;
  // Gradient of pi_w(z|x) itself (no division), used by mixtures.
  Vec prob_grad(const Vec& x, int z) const;

  // Mixture accessors.
  const std::vector<Component>& components() const { return fixed_; }
  double learnable_weight() const { return lambda_; }
  const Policy& learnable() const { return *learnable_; }

 private:
  Policy() = default;
  void check_x(const Vec& x) const;
  Vec mlp_logits(const Vec& x, Vec* hidden_out) const;

  PolicyForm form_ = PolicyForm::softmax_logits;
  int m_ = 0;
  int d_ = 0;
  int hidden_ = 0;
  Vec w_;
  std::vector<Component> fixed_;
  double lambda_ = 0.0;
  std::shared_ptr<const Policy> learnable_;
};

Vec softmax_probs(const Vec& logits);

// Ordered snapshots of every deployed policy with the number of samples each
// collected.
class PolicyRegistry {
 public:
  struct Entry {
    std::shared_ptr<const Policy> policy;
    long count;
  };

  // Returns the new policy id. Named add() because `register` is a keyword.
  int add(Policy p, long count);
  int add(std::shared_ptr<const Policy> p, long count);
  void add_count(int id, long extra);

  int size() const { return static_cast<int>(entries_.size()); }
  bool empty() const { return entries_.empty(); }
  long total_count() const { return total_; }
  const Policy& policy(int id) const;
  std::shared_ptr<const Policy> policy_ptr(int id) const;
  long count(int id) const;
  const std::vector<Entry>& entries() const { return entries_; }

  Vec average_probs(const Vec& x) const;
  double average_propensity(const Vec& x, int z) const;

 private:
  std::vector<Entry> entries_;
  long total_ = 0;
};

// pi_eff = (n/N) * registry average + (1 - n/N) * learnable.
Policy effective_policy(const PolicyRegistry& registry, const Policy& learnable, long n, long N);

}  // namespace dia
