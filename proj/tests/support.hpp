#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "loop/loop.hpp"

namespace testing {

inline bool rel_close(double a, double b, double tol) {
  return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)});
}

inline loop::Experiment make_experiment(std::vector<double> y, std::vector<std::uint8_t> t, double p = 0.5,
                                        loop::Design design = loop::Bernoulli{}) {
  loop::Experiment exp;
  const auto n = y.size();
  exp.y = std::move(y);
  exp.t = std::move(t);
  exp.p.assign(n, p);
  exp.z = Eigen::MatrixXd(static_cast<Eigen::Index>(n), 0);
  exp.design = std::move(design);
  return exp;
}

/// N units, exactly n treated at random positions, outcomes ~ N(mean, 1) per arm.
inline loop::Experiment random_experiment(std::mt19937_64& rng, std::size_t N, std::size_t n, double p,
                                          std::size_t q = 0) {
  std::vector<std::uint8_t> t(N, 0);
  std::fill(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(n), 1);
  std::shuffle(t.begin(), t.end(), rng);
  std::normal_distribution<double> normal;
  std::vector<double> y(N);
  for (std::size_t i = 0; i < N; ++i) y[i] = normal(rng) + (t[i] ? 1.5 : 0.0);
  auto exp = make_experiment(std::move(y), std::move(t), p);
  exp.z = Eigen::MatrixXd(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(q));
  for (Eigen::Index i = 0; i < exp.z.rows(); ++i)
    for (Eigen::Index j = 0; j < exp.z.cols(); ++j) exp.z(i, j) = normal(rng);
  return exp;
}

inline loop::PotentialOutcomesTable random_table(std::mt19937_64& rng, std::size_t N, double p, std::size_t q = 0) {
  std::normal_distribution<double> normal;
  loop::PotentialOutcomesTable po;
  po.t.resize(N);
  po.c.resize(N);
  po.p.assign(N, p);
  po.z = Eigen::MatrixXd(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(q));
  for (std::size_t i = 0; i < N; ++i) {
    for (Eigen::Index j = 0; j < po.z.cols(); ++j) po.z(static_cast<Eigen::Index>(i), j) = normal(rng);
    po.c[i] = normal(rng);
    po.t[i] = po.c[i] + 1.0 + 0.5 * normal(rng);
  }
  return po;
}

}  // namespace testing
