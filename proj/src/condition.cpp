#include "cfx/condition.hpp"

#include <algorithm>
#include <cmath>

namespace cfx {

BinIndex discretize(double p, double delta_shift, int num_bins) {
  if (num_bins < 2) throw ConfigError("discretize: num_bins must be >= 2");
  const double q = std::clamp(p + delta_shift, 0.0, 1.0);
  const int v = std::min(int(std::floor(q * num_bins)), num_bins - 1);
  return BinIndex{v, num_bins};
}

std::vector<int> ordinal_encode(const BinIndex& b) {
  std::vector<int> bits(std::size_t(b.num_bins - 1), 0);
  for (int i = 0; i < b.value; ++i) bits[std::size_t(i)] = 1;
  return bits;
}

}  // namespace cfx
