#pragma once

// Reference implementations written independently of the library, shared by
// the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "dynaseg/ops.hpp"

namespace dynaseg::testing {

// Sorted-array interpolation at p*(n-1).
inline double oracle_quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const double lo = std::floor(pos);
  const auto i = static_cast<size_t>(lo);
  if (i + 1 >= v.size()) return v.back();
  return v[i] * (1.0 - (pos - lo)) + v[i + 1] * (pos - lo);
}

// Brute-force IoU: per class, count intersection and union pixel by pixel.
inline double oracle_miou(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth, int k) {
  double total = 0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    int64_t inter = 0, uni = 0;
    for (size_t i = 0; i < truth.size(); ++i) {
      if (truth[i] == kVoidLabel) continue;
      const bool t = truth[i] == c, p = pred[i] == c;
      inter += t && p;
      uni += t || p;
    }
    if (uni == 0) continue;
    total += static_cast<double>(inter) / static_cast<double>(uni);
    ++present;
  }
  return total / present;
}

// Kept set by full sort: descending value, ascending index on ties.
inline std::vector<int64_t> sort_oracle(const std::vector<double>& g, int64_t count) {
  std::vector<int64_t> idx(g.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
    return g[a] != g[b] ? g[a] > g[b] : a < b;
  });
  idx.resize(static_cast<size_t>(count));
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace dynaseg::testing
