#pragma once

// Variance estimation for the LOOP estimator.
//
// The reported variance is a conservative bound built from cross-validated
// mean squared errors of the treated and control imputations:
//
//   var_hat = (1/N) [ (1-p)/p * M_t + p/(1-p) * M_c + 2 sqrt(M_t M_c) ]
//
// with M_t the mean of (t_hat_i - Y_i)^2 over treated units and M_c the
// analogue over controls. It ignores the average pairwise covariance of the
// unit effects; `gamma_bar_hat` estimates that term on request by refitting
// the imputer with and without each unit of a pair.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <unordered_set>
#include <vector>

#include "loop/common.hpp"
#include "loop/core.hpp"
#include "loop/imputers.hpp"

namespace loop {

/// `ArmCount` divides by n and N-n; `Expected` by Np and N(1-p), which makes
/// the estimates exactly unbiased for the average MSE.
enum class MseDenominator { ArmCount, Expected };

inline std::string to_string(MseDenominator d) { return d == MseDenominator::ArmCount ? "arm" : "expected"; }

struct MseEstimates {
  double m_t_hat = 0.0;
  double m_c_hat = 0.0;
};

struct VarianceReport {
  double m_t_hat = 0.0;
  double m_c_hat = 0.0;
  double var_hat = 0.0;
  double p = 0.5;
  MseDenominator denominator = MseDenominator::ArmCount;
};

inline MseEstimates mse_hats(const Experiment& exp, const ImputedOutcomes& imputed,
                             MseDenominator denominator = MseDenominator::ArmCount) {
  CompensatedSum treated, control;
  std::size_t n_t = 0;
  for (std::size_t i = 0; i < exp.size(); ++i) {
    if (exp.treated(i)) {
      const double e = imputed.t_hat[i] - exp.y[i];
      treated.add(e * e);
      ++n_t;
    } else {
      const double e = imputed.c_hat[i] - exp.y[i];
      control.add(e * e);
    }
  }
  const std::size_t n_c = exp.size() - n_t;
  if (denominator == MseDenominator::ArmCount) {
    if (n_t == 0 || n_c == 0)
      throw Error(ErrorKind::InsufficientArm, "MSE estimates need at least one unit in each arm");
    return {treated.value() / static_cast<double>(n_t), control.value() / static_cast<double>(n_c)};
  }
  const auto p = constant_probability(exp.p);
  if (!p) throw Error(ErrorKind::NonConstantP, "the Np / N(1-p) denominators need a constant p");
  const auto N = static_cast<double>(exp.size());
  return {treated.value() / (N * *p), control.value() / (N * (1.0 - *p))};
}

inline double variance_bound(double m_t_hat, double m_c_hat, double p, std::size_t n_total) {
  check_probability(p);
  if (n_total == 0) throw Error(ErrorKind::Domain, "variance bound needs N >= 1");
  if (m_t_hat < 0.0 || m_c_hat < 0.0 || !std::isfinite(m_t_hat) || !std::isfinite(m_c_hat))
    throw Error(ErrorKind::Domain, "MSE inputs must be finite and non-negative");
  const double mt = std::max(m_t_hat, 0.0);
  const double mc = std::max(m_c_hat, 0.0);
  return ((1.0 - p) / p * mt + p / (1.0 - p) * mc + 2.0 * std::sqrt(mt * mc)) / static_cast<double>(n_total);
}

/// Cross-validated variance bound. Requires a constant treatment probability.
inline VarianceReport estimate_variance(const Experiment& exp, const ImputedOutcomes& imputed,
                                        MseDenominator denominator = MseDenominator::ArmCount) {
  const auto p = constant_probability(exp.p);
  if (!p) throw Error(ErrorKind::NonConstantP, "variance estimation assumes p_i = p for every unit");
  const auto mse = mse_hats(exp, imputed, denominator);
  VarianceReport out;
  out.m_t_hat = mse.m_t_hat;
  out.m_c_hat = mse.m_c_hat;
  out.p = *p;
  out.denominator = denominator;
  out.var_hat = variance_bound(mse.m_t_hat, mse.m_c_hat, *p, exp.size());
  return out;
}

// ---------------------------------------------------------------------------
// Pairwise covariance of m_hat_i U_i and m_hat_j U_j
// ---------------------------------------------------------------------------

namespace detail {

inline void require_refittable(const ImputerMethod& method) {
  if (const auto* f = std::get_if<ForestImputer>(&method); f && f->mode == ForestMode::Oob)
    throw Error(ErrorKind::UnsupportedImputer,
                "covariance refits are undefined for out-of-bag forests; use exact_loo mode");
}

// The four refits for one unit of a pair: with and without the partner.
struct PairRefits {
  PotentialPair with_partner;
  PotentialPair without_partner;
};

inline PairRefits pair_refits(const Experiment& exp, const ImputerMethod& method, std::size_t unit,
                              std::size_t partner) {
  const std::size_t n = exp.size();
  const std::size_t one[] = {unit};
  std::size_t two[] = {std::min(unit, partner), std::max(unit, partner)};
  return {fit_predict(exp, method, complement(n, one), unit), fit_predict(exp, method, complement(n, two), unit)};
}

inline double cov_hat_from_refits(const Experiment& exp, std::size_t i, std::size_t j, const PairRefits& ri,
                                  const PairRefits& rj) {
  const double pi = exp.p[i];
  const double pj = exp.p[j];
  // d_t(i) = t_hat_i^{+j} - t_hat_i^{-j};  d_c(i) = c_hat_i^{-j} - c_hat_i^{+j}
  const double dti = ri.with_partner.t_hat - ri.without_partner.t_hat;
  const double dci = ri.without_partner.c_hat - ri.with_partner.c_hat;
  const double dtj = rj.with_partner.t_hat - rj.without_partner.t_hat;
  const double dcj = rj.without_partner.c_hat - rj.with_partner.c_hat;
  const bool ti = exp.treated(i);
  const bool tj = exp.treated(j);
  if (ti && tj) return (1.0 - pi) * (1.0 - pj) / (pi * pj) * dti * dtj;
  if (!ti && tj) return dti * dcj;
  if (ti && !tj) return dci * dtj;
  return pi * pj / ((1.0 - pi) * (1.0 - pj)) * dci * dcj;
}

}  // namespace detail

/// Unbiased estimate of Cov(m_hat_i U_i, m_hat_j U_j) from refits of the
/// imputer with and without the partner unit (unit i itself always left out).
inline double cov_hat_pair(const Experiment& exp, const ImputerMethod& method, std::size_t i, std::size_t j) {
  if (i == j) throw Error(ErrorKind::Domain, "cov_hat_pair needs two distinct units");
  if (i >= exp.size() || j >= exp.size()) throw Error(ErrorKind::Domain, "unit index out of range");
  detail::require_refittable(method);
  const auto ri = detail::pair_refits(exp, method, i, j);
  const auto rj = detail::pair_refits(exp, method, j, i);
  return detail::cov_hat_from_refits(exp, i, j, ri, rj);
}

struct PairCovariance {
  std::size_t i = 0;
  std::size_t j = 0;
  double value = 0.0;
};

struct CovDiagnostic {
  std::vector<PairCovariance> gamma_hat;  // unordered pairs, i < j
  double gamma_bar_hat = 0.0;
  std::size_t refits = 0;
  std::size_t total_pairs = 0;
};

/// Average of cov_hat_pair over all unordered pairs, or over `pair_budget`
/// pairs sampled uniformly without replacement.
inline CovDiagnostic gamma_bar_hat(const Experiment& exp, const ImputerMethod& method,
                                   std::optional<std::size_t> pair_budget = std::nullopt, std::uint64_t seed = 0,
                                   std::size_t threads = 0) {
  detail::require_refittable(method);
  const std::size_t n = exp.size();
  const std::uint64_t total = static_cast<std::uint64_t>(n) * (n - 1) / 2;

  // Row-major enumeration of (i, j), i < j: row i starts at i(2n - i - 1)/2.
  auto row_start = [n](std::uint64_t i) { return i * (2 * n - i - 1) / 2; };
  auto decode = [&](std::uint64_t k) {
    std::uint64_t lo = 0, hi = n - 1;  // invariant: row_start(lo) <= k < row_start(hi)
    while (hi - lo > 1) {
      const std::uint64_t mid = lo + (hi - lo) / 2;
      (row_start(mid) <= k ? lo : hi) = mid;
    }
    return std::pair<std::size_t, std::size_t>{static_cast<std::size_t>(lo),
                                               static_cast<std::size_t>(lo + 1 + (k - row_start(lo)))};
  };

  std::vector<std::uint64_t> chosen;
  if (!pair_budget || *pair_budget >= total) {
    chosen.resize(total);
    for (std::uint64_t k = 0; k < total; ++k) chosen[k] = k;
  } else {
    // Floyd's sampling without replacement.
    Rng rng = make_stream(seed, 0x9a1b);
    std::unordered_set<std::uint64_t> picked;
    for (std::uint64_t r = total - *pair_budget; r < total; ++r) {
      const std::uint64_t v = uniform_index(rng, r + 1);
      if (!picked.insert(v).second) picked.insert(r);
    }
    chosen.assign(picked.begin(), picked.end());
    std::sort(chosen.begin(), chosen.end());
  }

  // The "with partner" refit of unit i is its ordinary leave-one-out fit; cache it.
  std::vector<std::optional<PotentialPair>> loo(n);
  std::vector<char> needed(n, 0);
  for (auto k : chosen) {
    const auto [i, j] = decode(k);
    needed[i] = needed[j] = 1;
  }
  parallel_for(n, threads, [&](std::size_t i) {
    if (!needed[i]) return;
    const std::size_t one[] = {i};
    loo[i] = fit_predict(exp, method, complement(n, one), i);
  });

  CovDiagnostic out;
  out.total_pairs = static_cast<std::size_t>(total);
  out.gamma_hat.resize(chosen.size());
  parallel_for(chosen.size(), threads, [&](std::size_t r) {
    const auto [i, j] = decode(chosen[r]);
    const std::size_t two[] = {i, j};
    const auto rest = complement(n, two);
    detail::PairRefits ri{*loo[i], fit_predict(exp, method, rest, i)};
    detail::PairRefits rj{*loo[j], fit_predict(exp, method, rest, j)};
    out.gamma_hat[r] = PairCovariance{i, j, detail::cov_hat_from_refits(exp, i, j, ri, rj)};
  });
  CompensatedSum sum;
  for (const auto& g : out.gamma_hat) sum.add(g.value);
  out.gamma_bar_hat = out.gamma_hat.empty() ? 0.0 : sum.value() / static_cast<double>(out.gamma_hat.size());
  out.refits = static_cast<std::size_t>(std::count(needed.begin(), needed.end(), 1)) + 2 * chosen.size();
  return out;
}

}  // namespace loop
