#pragma once

// Brute-force isotonic regression: enumerate every partition of the sequence
// into contiguous blocks, keep those whose block means are nondecreasing, and
// return the fit with the least squared error.

#include <cstddef>
#include <limits>
#include <vector>

namespace ellipse::testing {

inline std::vector<double> brute_force_isotonic(const std::vector<double>& y) {
  const std::size_t n = y.size();
  if (n == 0) return {};
  std::vector<double> best;
  double best_sse = std::numeric_limits<double>::infinity();
  const std::size_t cuts = n - 1;
  for (std::size_t mask = 0; mask < (std::size_t{1} << cuts); ++mask) {
    std::vector<double> fit(n);
    double prev_mean = -std::numeric_limits<double>::infinity();
    bool monotone = true;
    std::size_t start = 0;
    for (std::size_t i = 0; i < n && monotone; ++i) {
      const bool block_ends = i == n - 1 || ((mask >> i) & 1U);
      if (!block_ends) continue;
      double sum = 0.0;
      for (std::size_t k = start; k <= i; ++k) sum += y[k];
      const double mean = sum / static_cast<double>(i - start + 1);
      if (mean < prev_mean - 1e-15) monotone = false;
      for (std::size_t k = start; k <= i; ++k) fit[k] = mean;
      prev_mean = mean;
      start = i + 1;
    }
    if (!monotone) continue;
    double sse = 0.0;
    for (std::size_t k = 0; k < n; ++k) sse += (fit[k] - y[k]) * (fit[k] - y[k]);
    if (sse < best_sse - 1e-15) {
      best_sse = sse;
      best = fit;
    }
  }
  return best;
}

}  // namespace ellipse::testing
