#pragma once

// The LOOP point estimate, its variance bound and a normal-approximation
// confidence interval, assembled into one report.

#include <boost/math/distributions/normal.hpp>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "loop/common.hpp"
#include "loop/core.hpp"
#include "loop/imputers.hpp"
#include "loop/variance.hpp"

namespace loop {

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
};

struct DropSummary {
  DropMode mode = DropMode::Sampled;
  std::size_t reps = 0;
  std::optional<double> mc_se;  // Monte Carlo SE of the drop averaging (sampled mode)
};

struct EstimateOptions {
  double ci_level = 0.95;
  bool variance = true;
  MseDenominator denominator = MseDenominator::ArmCount;
  bool gamma_diagnostic = false;
  std::optional<std::size_t> pair_budget;
  std::uint64_t seed = 0;
};

struct EstimateReport {
  double tau_hat = 0.0;
  std::vector<double> tau_units;
  std::optional<VarianceReport> variance;
  std::optional<double> se;
  double ci_level = 0.95;
  std::optional<Interval> ci;  // normal approximation
  std::size_t n_treated = 0;
  std::size_t n_control = 0;
  std::string imputer_id;
  ImputedOutcomes imputed;
  std::optional<DropSummary> random_drop;
  std::optional<CovDiagnostic> gamma;
  std::vector<std::string> caveats;

  double m_t_hat() const { return variance ? variance->m_t_hat : std::nan(""); }
  double m_c_hat() const { return variance ? variance->m_c_hat : std::nan(""); }
  double var_hat() const { return variance ? variance->var_hat : std::nan(""); }
};

inline double normal_quantile(double probability) {
  return boost::math::quantile(boost::math::normal_distribution<double>(), probability);
}

/// Averages the per-unit effects into the LOOP estimate and attaches the
/// variance bound (constant p only) and interval.
inline EstimateReport loop_estimate(const Experiment& exp, const ImputedOutcomes& imputed,
                                    const EstimateOptions& options = {}) {
  if (!(options.ci_level > 0.0 && options.ci_level < 1.0))
    throw Error(ErrorKind::Domain, "confidence level must lie in (0,1)");
  if (imputed.m_hat.size() != exp.size() || imputed.t_hat.size() != exp.size() ||
      imputed.c_hat.size() != exp.size())
    throw Error(ErrorKind::Domain, "imputed outcomes do not match the experiment size");
  require_two_per_arm(exp);

  EstimateReport report;
  report.tau_units = unit_effects(exp, imputed);
  report.tau_hat = mean_of(report.tau_units);
  report.n_treated = exp.n_treated();
  report.n_control = exp.n_control();
  report.imputer_id = imputed.imputer_id;
  report.ci_level = options.ci_level;
  report.imputed = imputed;

  if (options.variance) {
    report.variance = estimate_variance(exp, imputed, options.denominator);
    report.se = std::sqrt(report.variance->var_hat);
    const double z = normal_quantile(0.5 * (1.0 + options.ci_level));
    report.ci = Interval{report.tau_hat - z * *report.se, report.tau_hat + z * *report.se};
  }
  if (imputed.rank_deficient_fits > 0) report.caveats.emplace_back("ols_rank_deficient_fallback");
  if (imputed.pooled_fallbacks > 0) report.caveats.emplace_back("pooled_empty_arm_fallback");
  return report;
}

}  // namespace loop
