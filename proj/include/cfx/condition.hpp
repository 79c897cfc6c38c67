#pragma once

#include <vector>

#include "cfx/util.hpp"

namespace cfx {

// Discrete condition bin for a posterior score; num_bins = floor(1/delta).
struct BinIndex {
  int value = 0;
  int num_bins = 2;
};

// Out-of-range p + shift is clamped to [0,1]; the top edge maps into the
// last bin.
BinIndex discretize(double p, double delta_shift, int num_bins);

// Cumulative binary encoding: bits[i] = 1 iff i < value.
std::vector<int> ordinal_encode(const BinIndex& b);

inline double bin_lower(const BinIndex& b) { return double(b.value) / b.num_bins; }
inline double bin_upper(const BinIndex& b) { return double(b.value + 1) / b.num_bins; }
inline double bin_center(const BinIndex& b) { return (b.value + 0.5) / b.num_bins; }

}  // namespace cfx
