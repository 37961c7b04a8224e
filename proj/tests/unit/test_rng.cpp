#include <doctest.h>

#include <cmath>
#include <vector>

#include "dia/rng.hpp"

using dia::Rng;

TEST_CASE("philox4x32-10 known answers") {
  // Random123 kat_vectors.
  CHECK(Rng::philox({0, 0, 0, 0}, {0, 0}) ==
        Rng::Block{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u});
  CHECK(Rng::philox({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}) ==
        Rng::Block{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu});
  CHECK(Rng::philox({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}) ==
        Rng::Block{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u});
}

TEST_CASE("streams are reproducible and splits are distinct") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng root(42);
  CHECK(root.split(0).key() == Rng(42).split(0).key());
  CHECK(root.split(0).key() != root.split(1).key());
  CHECK(root.split(0).split(1).key() != root.split(1).split(0).key());
  Rng c = root.split(3), d = root.split(3);
  CHECK(c.uniform() == d.uniform());
}

TEST_CASE("distribution moments") {
  Rng r(7);
  const int n = 200000;
  double su = 0, sn = 0, sn2 = 0;
  for (int i = 0; i < n; ++i) {
    double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    su += u;
    double z = r.normal();
    sn += z;
    sn2 += z * z;
  }
  CHECK(std::abs(su / n - 0.5) < 3 * std::sqrt(1.0 / 12 / n) + 1e-4);
  CHECK(std::abs(sn / n) < 4 / std::sqrt(n));
  CHECK(std::abs(sn2 / n - 1.0) < 4 * std::sqrt(2.0 / n));
}

TEST_CASE("categorical and below are unbiased") {
  Rng r(8);
  std::vector<double> p{0.1, 0.6, 0.3};
  std::vector<int> counts(3, 0), bc(3, 0);
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    ++counts[r.categorical(p)];
    ++bc[r.below(3)];
  }
  for (int k = 0; k < 3; ++k) {
    CHECK(std::abs(counts[k] / double(n) - p[k]) < 4 * std::sqrt(p[k] * (1 - p[k]) / n));
    CHECK(std::abs(bc[k] / double(n) - 1.0 / 3) < 4 * std::sqrt(2.0 / 9 / n));
  }
}
