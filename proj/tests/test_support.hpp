#pragma once

#include "autoassign/diffcore.hpp"

#include <Eigen/Core>

#include <random>

namespace autoassign::testing {

inline Eigen::ArrayXd random_values(std::mt19937_64& rng, Index n, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Eigen::ArrayXd v(n);
  for (Index i = 0; i < n; ++i) v(i) = dist(rng);
  return v;
}

inline Eigen::ArrayXd values(std::initializer_list<double> xs) {
  Eigen::ArrayXd v(static_cast<Index>(xs.size()));
  Index i = 0;
  for (double x : xs) v(i++) = x;
  return v;
}

}  // namespace autoassign::testing
