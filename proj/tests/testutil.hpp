#pragma once

// Shared oracles for the test suites. Everything here is independent of the
// library's backward pass: finite differences, exact enumeration, and basic
// sample statistics.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

namespace testutil {

using Vec = std::vector<double>;

/// Central finite difference of a scalar function of a flat vector.
inline Vec fd_gradient(const std::function<double(const Vec&)>& f, Vec x,
                       double h = 1e-4) {
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double orig = x[i];
    x[i] = orig + h;
    double fp = f(x);
    x[i] = orig - h;
    double fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double fd_partial(const std::function<double(double)>& f, double x,
                         double h = 1e-4) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

/// Relative error with an absolute floor for near-zero references.
inline double rel_error(double got, double want, double floor = 1e-6) {
  double denom = std::max(std::abs(want), floor);
  return std::abs(got - want) / denom;
}

inline double max_rel_error(const Vec& got, const Vec& want,
                            double floor = 1e-6) {
  double m = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i)
    m = std::max(m, rel_error(got[i], want[i], floor));
  return m;
}

struct MeanSe {
  double mean;
  double se;
};

inline MeanSe mean_se(const Vec& xs) {
  double n = static_cast<double>(xs.size());
  double m = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  double var = ss / (n - 1.0);
  return {m, std::sqrt(var / n)};
}

inline double sample_variance(const Vec& xs) {
  auto [m, se] = mean_se(xs);
  (void)m;
  double n = static_cast<double>(xs.size());
  return se * se * n;
}

/// Two-sample Kolmogorov-Smirnov statistic.
inline double ks_statistic(Vec a, Vec b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double d = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] <= b[j])
      ++i;
    else
      ++j;
    double fa = static_cast<double>(i) / a.size();
    double fb = static_cast<double>(j) / b.size();
    d = std::max(d, std::abs(fa - fb));
  }
  return d;
}

}  // namespace testutil
