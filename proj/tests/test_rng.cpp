#include <cmath>
#include <vector>

#include "doctest.h"
#include "peva/rng.hpp"

using peva::Rng;

TEST_SUITE("rng") {

TEST_CASE("stream matches the reference generator") {
  // SplitMix64-seeded xoshiro256**, values from an independent Python implementation.
  Rng zero(0);
  CHECK(zero.next() == 0x99ec5f36cb75f2b4ULL);
  CHECK(zero.next() == 0xbf6e1f784956452aULL);
  CHECK(zero.next() == 0x1a5f849d4933e6e0ULL);
  Rng answer(42);
  CHECK(answer.next() == 0x15780b2e0c2ec716ULL);
  CHECK(answer.next() == 0x6104d9866d113a7eULL);
}

TEST_CASE("uniform derives from the top 53 bits") {
  Rng a(9), b(9);
  for (int i = 0; i < 100; ++i) {
    const double u = a.uniform();
    CHECK(u == static_cast<double>(b.next() >> 11) * 0x1.0p-53);
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
}

TEST_CASE("bounded and normal draws") {
  Rng rng(10);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 5000; ++i) {
    const auto k = rng.below(5);
    REQUIRE(k < 5);
    ++counts[k];
  }
  for (int c : counts) CHECK(c > 800);
  CHECK(rng.below(1) == 0);

  double mean = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    mean += z;
    sq += z * z;
  }
  mean /= n;
  CHECK(std::abs(mean) < 0.03);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
  for (int i = 0; i < 2000; ++i) CHECK(std::abs(rng.truncated_normal(0.02)) <= 0.04);
}

}  // TEST_SUITE
