#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "rdr/errors.hpp"

namespace rdr::stats {

// Two-sided Kolmogorov-Smirnov statistic against Uniform(lo, hi).
inline double ks_statistic_uniform(std::vector<double> samples, double lo,
                                   double hi) {
  if (samples.empty()) throw Error("ks_statistic_uniform: no samples");
  if (!(hi > lo)) throw Error("ks_statistic_uniform: empty interval");
  std::sort(samples.begin(), samples.end());
  const double n = static_cast<double>(samples.size());
  double d = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double cdf = std::clamp((samples[i] - lo) / (hi - lo), 0.0, 1.0);
    d = std::max(d, cdf - static_cast<double>(i) / n);
    d = std::max(d, static_cast<double>(i + 1) / n - cdf);
  }
  return d;
}

// Asymptotic critical value at significance 0.01: c(0.01) / sqrt(n).
inline double ks_critical_001(std::size_t n) {
  return 1.62762 / std::sqrt(static_cast<double>(n));
}

// Chi-square statistic for a fair two-sided coin observed (a, b) times.
inline double chi_square_fair_coin(std::size_t a, std::size_t b) {
  const double e = 0.5 * static_cast<double>(a + b);
  if (e <= 0.0) throw Error("chi_square_fair_coin: no observations");
  const double da = static_cast<double>(a) - e;
  const double db = static_cast<double>(b) - e;
  return (da * da + db * db) / e;
}

// 0.01 upper quantile of chi-square with one degree of freedom.
inline constexpr double kChiSquare1Dof001 = 6.634896601021213;

}  // namespace rdr::stats
