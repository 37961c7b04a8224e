#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace dia {

// Philox4x32-10 counter-based generator (Salmon et al., Random123).
//
// A stream is identified by its 64-bit key; split(id) derives a child key
// with splitmix64 so trial -> allocation -> subset hierarchies never share
// counters. All distributions are implemented here rather than through
// <random> so output is identical across standard libraries.
class Rng {
 public:
  using Block = std::array<std::uint32_t, 4>;

  explicit Rng(std::uint64_t seed = 0) : key_(seed) {}

  static Block philox(Block counter, std::array<std::uint32_t, 2> key);

  Rng split(std::uint64_t id) const;
  std::uint64_t key() const { return key_; }

  std::uint32_t next_u32();
  std::uint64_t next_u64();

  // 53-bit uniform in [0, 1).
  double uniform();
  // Uniform in (0, 1]; safe for log.
  double uniform_pos() { return 1.0 - uniform(); }
  // Box-Muller; always consumes exactly two uniforms.
  double normal();
  double normal(double mean, double sd) { return mean + sd * normal(); }
  bool bernoulli(double p) { return uniform() < p; }
  // Inverse-CDF draw; consumes exactly one uniform.
  int categorical(std::span<const double> probs);
  // Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  void refill();

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  Block buf_{};
  int pos_ = 4;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace dia
