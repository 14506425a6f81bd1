#pragma once

// Random drop for dependent assignment designs.
//
// Under complete, blocked or paired randomization T_i is correlated with the
// other assignments, so a plain leave-one-out fit leaks T_i into m_hat_i.
// Dropping one extra opposite-arm unit (from i's block, or i's pair partner)
// restores independence: whatever T_i is, the imputer sees the same
// distribution of retained arrangements. Averaging over many drops recovers
// the information lost by the extra exclusion.

#include <cstddef>
#include <cstdint>
#include <map>
#include <tuple>
#include <vector>

#include "loop/common.hpp"
#include "loop/core.hpp"
#include "loop/estimator.hpp"
#include "loop/imputers.hpp"
#include "loop/variance.hpp"

namespace loop {

struct DropPlan {
  std::size_t unit = 0;
  std::vector<std::size_t> dropped;  // sorted, always contains `unit`
};

namespace detail {

inline std::int64_t block_of(const Experiment& exp, std::size_t i) {
  if (const auto* b = std::get_if<Blocked>(&exp.design)) return b->block[i];
  return 0;
}

inline DropPlan make_plan(std::size_t i, std::optional<std::size_t> extra) {
  DropPlan plan{i, {i}};
  if (extra) {
    plan.dropped.push_back(*extra);
    std::sort(plan.dropped.begin(), plan.dropped.end());
  }
  return plan;
}

}  // namespace detail

/// Units that may be dropped alongside i. Empty for Bernoulli designs; the
/// partner for paired designs; otherwise the opposite arm (within i's block).
inline std::vector<std::size_t> drop_pool(const Experiment& exp, std::size_t i) {
  if (i >= exp.size()) throw Error(ErrorKind::Domain, "unit index out of range");
  std::vector<std::size_t> pool;
  if (std::holds_alternative<Bernoulli>(exp.design)) return pool;
  if (const auto* paired = std::get_if<Paired>(&exp.design)) {
    for (std::size_t k = 0; k < exp.size(); ++k)
      if (k != i && paired->pair[k] == paired->pair[i]) pool.push_back(k);
    if (pool.size() != 1)
      throw Error(ErrorKind::InvalidExperiment, "pair " + std::to_string(paired->pair[i]) + " is not a pair");
    return pool;
  }
  const auto block = detail::block_of(exp, i);
  for (std::size_t k = 0; k < exp.size(); ++k)
    if (exp.t[k] != exp.t[i] && detail::block_of(exp, k) == block) pool.push_back(k);
  if (pool.empty())
    throw Error(ErrorKind::EmptyOppositeArm, "block " + std::to_string(block) + " has no " +
                                                 (exp.treated(i) ? "control" : "treated") + " unit to drop for unit " +
                                                 std::to_string(i));
  return pool;
}

/// Every equally likely drop plan for unit i.
inline std::vector<DropPlan> drop_support(const Experiment& exp, std::size_t i) {
  if (std::holds_alternative<Bernoulli>(exp.design)) return {detail::make_plan(i, std::nullopt)};
  std::vector<DropPlan> out;
  for (auto k : drop_pool(exp, i)) out.push_back(detail::make_plan(i, k));
  return out;
}

inline DropPlan draw_drop_plan(const Experiment& exp, std::size_t i, Rng& rng) {
  if (std::holds_alternative<Bernoulli>(exp.design)) return detail::make_plan(i, std::nullopt);
  const auto pool = drop_pool(exp, i);
  return detail::make_plan(i, pool[uniform_index(rng, pool.size())]);
}

/// Drop plan for unit i from the stream keyed by (seed, rep, unit).
inline DropPlan random_drop_plan(const Experiment& exp, std::size_t i, std::uint64_t seed, std::size_t rep = 0) {
  Rng rng = make_stream(seed, rep, i);
  return draw_drop_plan(exp, i, rng);
}

namespace detail {

// Closed-form average over all drops for mean / strata imputers. The drop
// only removes an opposite-arm unit, so the own-arm mean is the ordinary
// leave-one-out mean; the opposite-arm stratum mean is averaged over the pool.
inline ImputedOutcomes expected_drop_means(const Experiment& exp, const std::vector<std::int64_t>* labels,
                                           const std::string& id) {
  const std::size_t n = exp.size();
  auto stratum = [&](std::size_t k) -> std::int64_t { return labels ? (*labels)[k] : 0; };
  const bool paired = std::holds_alternative<Paired>(exp.design);

  // (block, stratum, arm) -> (sum, count) and (block, arm) -> count
  std::map<std::tuple<std::int64_t, std::int64_t, int>, std::pair<CompensatedSum, std::size_t>> cell;
  std::map<std::pair<std::int64_t, std::int64_t>, std::pair<CompensatedSum, std::size_t>> stratum_arm;
  for (std::size_t k = 0; k < n; ++k) {
    auto& c = cell[{block_of(exp, k), stratum(k), exp.t[k]}];
    c.first.add(exp.y[k]);
    ++c.second;
    auto& s = stratum_arm[{stratum(k), exp.t[k]}];
    s.first.add(exp.y[k]);
    ++s.second;
  }
  std::map<std::pair<std::int64_t, int>, std::size_t> block_arm;
  for (std::size_t k = 0; k < n; ++k) ++block_arm[{block_of(exp, k), exp.t[k]}];

  const auto own = labels ? impute_strata(exp, *labels) : impute_mean(exp);
  ImputedOutcomes out;
  out.imputer_id = id;
  out.t_hat.resize(n);
  out.c_hat.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int a = exp.t[i];
    const int b = 1 - a;
    const auto s = stratum(i);
    const auto& opp = stratum_arm.at({s, b});
    const double total = opp.first.value();
    const auto n_s = opp.second;

    double expected;
    if (paired) {
      const auto partner = drop_pool(exp, i).front();
      const bool same = stratum(partner) == s;
      if (same && n_s < 2)
        throw Error(ErrorKind::StratumTooSmall, "dropping the partner of unit " + std::to_string(i) +
                                                    " empties its stratum's opposite arm");
      expected = same ? (total - exp.y[partner]) / static_cast<double>(n_s - 1) : total / static_cast<double>(n_s);
    } else {
      const auto block = block_of(exp, i);
      const auto pool_size = block_arm.at({block, b});
      const auto it = cell.find({block, s, b});
      const std::size_t in_stratum = it == cell.end() ? 0 : it->second.second;
      const double in_stratum_sum = it == cell.end() ? 0.0 : it->second.first.value();
      double acc = static_cast<double>(pool_size - in_stratum) * total / static_cast<double>(n_s);
      if (in_stratum > 0) {
        if (n_s < 2)
          throw Error(ErrorKind::StratumTooSmall, "a drop for unit " + std::to_string(i) +
                                                      " empties stratum " + std::to_string(s) + "'s opposite arm");
        acc += (static_cast<double>(in_stratum) * total - in_stratum_sum) / static_cast<double>(n_s - 1);
      }
      expected = acc / static_cast<double>(pool_size);
    }
    if (a == 1) {
      out.t_hat[i] = own.t_hat[i];
      out.c_hat[i] = expected;
    } else {
      out.c_hat[i] = own.c_hat[i];
      out.t_hat[i] = expected;
    }
  }
  finalize_m(exp, out);
  return out;
}

}  // namespace detail

struct DropImputation {
  ImputedOutcomes imputed;
  DropSummary summary;
};

/// Leave-one-out imputation with random drop. Bernoulli designs pass
/// straight through to impute_loo.
inline DropImputation impute_with_random_drop(const Experiment& exp, const ImputerMethod& method,
                                              const RandomDropOptions& options, std::size_t threads = 0) {
  DropImputation result;
  result.summary.mode = options.mode;
  if (std::holds_alternative<Bernoulli>(exp.design)) {
    result.imputed = impute_loo(exp, method);
    result.summary.reps = 0;
    return result;
  }
  const std::size_t n = exp.size();
  const std::string id = imputer_id(method) + "+drop(" + to_string(options.mode) + ")";

  if (options.mode == DropMode::Expectation) {
    const auto* mean = std::get_if<MeanImputer>(&method);
    const auto* strata = std::get_if<StrataImputer>(&method);
    if ((!mean && !strata) || (mean && mean->empty_arm != EmptyArmPolicy::Error) ||
        (strata && strata->empty_arm != EmptyArmPolicy::Error))
      throw Error(ErrorKind::UnsupportedImputer,
                  "expectation-mode random drop is closed-form only for mean and strata imputers without "
                  "pooling; use sampled or exhaustive mode");
    result.imputed = detail::expected_drop_means(exp, strata ? &strata->labels : nullptr, id);
    result.summary.reps = 0;
    return result;
  }

  if (options.mode == DropMode::Sampled && options.reps < 1)
    throw Error(ErrorKind::Domain, "random drop needs at least one repetition");

  ImputedOutcomes out;
  out.imputer_id = id;
  out.t_hat.assign(n, 0.0);
  out.c_hat.assign(n, 0.0);
  const std::size_t reps = options.mode == DropMode::Sampled ? options.reps : 0;
  std::vector<double> tau_by_rep(reps * n, 0.0);  // [rep * n + i]
  std::vector<std::size_t> deficient(n, 0), pooled(n, 0);

  parallel_for(n, threads, [&](std::size_t i) {
    std::vector<DropPlan> plans;
    if (options.mode == DropMode::Exhaustive) {
      plans = drop_support(exp, i);
    } else {
      plans.reserve(reps);
      for (std::size_t r = 0; r < reps; ++r) plans.push_back(random_drop_plan(exp, i, options.seed, r));
    }
    CompensatedSum t_sum, c_sum;
    const double weight = signed_weight(exp.treated(i), exp.p[i]);
    for (std::size_t r = 0; r < plans.size(); ++r) {
      const auto fit = fit_predict(exp, method, complement(n, plans[r].dropped), i);
      t_sum.add(fit.t_hat);
      c_sum.add(fit.c_hat);
      deficient[i] += fit.rank_deficient ? 1 : 0;
      pooled[i] += fit.pooled ? 1 : 0;
      if (r < reps) {
        const double m = combine_m(fit.t_hat, fit.c_hat, exp.p[i]);
        tau_by_rep[r * n + i] = unit_effect(exp.y[i], m, weight);
      }
    }
    out.t_hat[i] = t_sum.value() / static_cast<double>(plans.size());
    out.c_hat[i] = c_sum.value() / static_cast<double>(plans.size());
  });
  for (std::size_t i = 0; i < n; ++i) {
    out.rank_deficient_fits += deficient[i];
    out.pooled_fallbacks += pooled[i];
  }
  finalize_m(exp, out);

  result.summary.reps = options.mode == DropMode::Sampled ? reps : 0;
  if (reps >= 2) {
    std::vector<double> per_rep(reps);
    for (std::size_t r = 0; r < reps; ++r)
      per_rep[r] = mean_of(std::span<const double>(tau_by_rep.data() + r * n, n));
    const double centre = mean_of(per_rep);
    CompensatedSum ss;
    for (double v : per_rep) ss.add((v - centre) * (v - centre));
    result.summary.mc_se = std::sqrt(ss.value() / static_cast<double>(reps - 1) / static_cast<double>(reps));
  }
  result.imputed = std::move(out);
  return result;
}

/// LOOP estimate with random drop applied for dependent designs.
inline EstimateReport loop_with_random_drop(const Experiment& exp, const ImputerMethod& method,
                                            const RandomDropOptions& options,
                                            const EstimateOptions& estimate_options = {}) {
  auto dropped = impute_with_random_drop(exp, method, options);
  auto report = loop_estimate(exp, dropped.imputed, estimate_options);
  if (is_dependent(exp.design)) {
    report.random_drop = dropped.summary;
    if (report.variance) report.caveats.emplace_back("variance_bound_under_dependent_design");
  }
  return report;
}

inline EstimateReport loop_with_random_drop(const Experiment& exp, const ImputerSpec& spec, std::size_t reps,
                                            std::uint64_t seed) {
  RandomDropOptions options = spec.random_drop.value_or(RandomDropOptions{});
  options.reps = reps;
  options.seed = seed;
  return loop_with_random_drop(exp, spec.method, options);
}

/// Imputation for a full spec: random drop when requested, plain
/// leave-one-out otherwise.
inline ImputedOutcomes impute(const Experiment& exp, const ImputerSpec& spec) {
  if (spec.random_drop) return impute_with_random_drop(exp, spec.method, *spec.random_drop).imputed;
  return impute_loo(exp, spec.method);
}

/// End-to-end estimate: validation, imputation (with random drop when the
/// spec asks for it), point estimate, variance and optional covariance
/// diagnostic.
inline EstimateReport estimate(const Experiment& exp, const ImputerSpec& spec, const EstimateOptions& options = {}) {
  validate(exp);
  EstimateReport report;
  if (spec.random_drop) {
    report = loop_with_random_drop(exp, spec.method, *spec.random_drop, options);
  } else {
    report = loop_estimate(exp, impute_loo(exp, spec.method), options);
    if (is_dependent(exp.design)) report.caveats.emplace_back("dependent_design_without_random_drop");
  }
  if (options.gamma_diagnostic) report.gamma = gamma_bar_hat(exp, spec.method, options.pair_budget, options.seed);
  return report;
}

}  // namespace loop
