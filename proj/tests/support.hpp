#pragma once

#include "pigmen/core.hpp"

#include <cmath>
#include <functional>
#include <random>

namespace testing_support {

using pigmen::Matrix;
using pigmen::Vector;

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

inline Vector random_vector(std::mt19937_64& rng, Eigen::Index n) {
  std::normal_distribution<double> dist;
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = dist(rng);
  return v;
}

/// Random entries bounded away from zero, so relu/abs kinks are never probed.
inline Matrix random_away_from_kinks(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double v = 0.0;
    do v = dist(rng);
    while (std::abs(v) < 1e-4);
    m.data()[i] = v;
  }
  return m;
}

/// Central difference of f with respect to entry k of x.
inline double central_difference(const std::function<double(const Matrix&)>& f, Matrix x, Eigen::Index k,
                                 double h = 1e-6) {
  const double x0 = x.data()[k];
  x.data()[k] = x0 + h;
  const double fp = f(x);
  x.data()[k] = x0 - h;
  const double fm = f(x);
  return (fp - fm) / (2.0 * h);
}

inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace testing_support
