#include <doctest.h>

#include "cfx/condition.hpp"
#include "cfx/util.hpp"

using namespace cfx;

TEST_CASE("discretize maps posteriors to bins") {
  CHECK(discretize(0.0, 0.0, 10).value == 0);
  CHECK(discretize(0.47, 0.0, 10).value == 4);
  CHECK(discretize(1.0, 0.0, 10).value == 9);  // top edge clamps into last bin
  CHECK(discretize(0.95, 0.3, 10).value == 9);
  CHECK(discretize(0.05, -0.3, 10).value == 0);
  CHECK_THROWS_AS(discretize(0.5, 0.0, 1), ConfigError);
}

TEST_CASE("ordinal encode is a prefix of ones") {
  CHECK(ordinal_encode(BinIndex{0, 10}) == std::vector<int>(9, 0));
  CHECK(ordinal_encode(BinIndex{3, 10}) == std::vector<int>{1, 1, 1, 0, 0, 0, 0, 0, 0});
  CHECK(ordinal_encode(BinIndex{9, 10}) == std::vector<int>(9, 1));
}

TEST_CASE("ordinal encoding is monotone in the bin index") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int nb = int(rng.uniform_int(2, 16));
    const int b1 = int(rng.uniform_int(0, nb - 1));
    const int b2 = int(rng.uniform_int(0, nb - 1));
    const auto e1 = ordinal_encode(BinIndex{std::min(b1, b2), nb});
    const auto e2 = ordinal_encode(BinIndex{std::max(b1, b2), nb});
    for (std::size_t i = 0; i < e1.size(); ++i) CHECK(e1[i] <= e2[i]);
  }
}

TEST_CASE("shifted and unshifted bins differ by at most ceil(delta*num_bins)") {
  Rng rng(6);
  for (int trial = 0; trial < 500; ++trial) {
    const int nb = int(rng.uniform_int(2, 20));
    const double p = rng.uniform();
    const double d = rng.uniform(-1.0, 1.0);
    const int b0 = discretize(p, 0.0, nb).value;
    const int bd = discretize(p, d, nb).value;
    CHECK(std::abs(bd - b0) <= int(std::ceil(std::fabs(d) * nb)));
  }
}

TEST_CASE("posterior strictly inside a bin round-trips") {
  Rng rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    const int nb = int(rng.uniform_int(2, 20));
    const int k = int(rng.uniform_int(0, nb - 1));
    const double p = (k + 0.1 + 0.8 * rng.uniform()) / nb;
    CHECK(discretize(p, 0.0, nb).value == k);
  }
}
