#pragma once

#include <stdexcept>
#include <string>

namespace dia {

// Bad user input: malformed config, out-of-range option, shape mismatch.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct RankDeficientError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A sample has positive target probability but zero behaviour probability.
struct SupportError : std::domain_error {
  using std::domain_error::domain_error;
};

struct ConvergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AcceptanceError : std::runtime_error {
  AcceptanceError(long accepted_, long k_)
      : std::runtime_error("insufficient acceptance: N'=" + std::to_string(accepted_) +
                           " < k=" + std::to_string(k_)),
        accepted(accepted_),
        k(k_) {}
  long accepted;
  long k;
};

}  // namespace dia
