#pragma once

// Leave-one-out imputation of both potential outcomes.
//
// Every imputer produces (t_hat_i, c_hat_i) for unit i from the other N-1
// units only, which is what makes m_hat_i independent of T_i. Mean and strata
// imputers use prefix/suffix sums that never touch unit i, so the
// leave-one-out contract holds bit for bit. OLS refits on the N-1 rows
// directly. The forest imputer fits one forest per arm and uses out-of-bag
// predictions for the unit's own arm (or an exact refit).

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "loop/common.hpp"
#include "loop/core.hpp"
#include "loop/forest.hpp"

namespace loop {

/// What to do when a leave-one-out arm (or stratum arm) is empty.
/// `Pool` falls back stratum arm -> whole-sample arm -> all other units; each
/// fallback still depends on the other N-1 units only.
/// `Prior` substitutes a fixed value, so an arm's prediction never looks at
/// the other arm (the covariance estimator relies on that separation).
enum class EmptyArmPolicy { Error, Pool, Prior };

struct MeanImputer {
  EmptyArmPolicy empty_arm = EmptyArmPolicy::Error;
  double prior = 0.0;
};

struct StrataImputer {
  std::vector<std::int64_t> labels;
  EmptyArmPolicy empty_arm = EmptyArmPolicy::Error;
  double prior = 0.0;
};

struct OlsImputer {
  bool include_intercept = true;
  bool allow_fallback = true;  // minimum-norm solution on rank-deficient fits
};

enum class ForestMode { Oob, ExactLoo };

struct ForestImputer {
  ForestParams params;
  ForestMode mode = ForestMode::Oob;
};

using ImputerMethod = std::variant<MeanImputer, StrataImputer, OlsImputer, ForestImputer>;

/// Random-drop settings for dependent designs.
///  - Sampled: average over `reps` random drops per unit.
///  - Expectation: closed-form average over all drops (mean and strata only).
///  - Exhaustive: refit for every possible drop and average (any imputer).
enum class DropMode { Sampled, Expectation, Exhaustive };

struct RandomDropOptions {
  DropMode mode = DropMode::Sampled;
  std::size_t reps = 20;
  std::uint64_t seed = 0;
};

struct ImputerSpec {
  ImputerMethod method = MeanImputer{};
  std::optional<RandomDropOptions> random_drop;
};

inline std::string to_string(ForestMode mode) { return mode == ForestMode::Oob ? "oob" : "exact_loo"; }

inline std::string to_string(DropMode mode) {
  switch (mode) {
    case DropMode::Sampled: return "sampled";
    case DropMode::Expectation: return "expectation";
    case DropMode::Exhaustive: return "exhaustive";
  }
  return "unknown";
}

inline std::string policy_suffix(EmptyArmPolicy policy) {
  switch (policy) {
    case EmptyArmPolicy::Error: return "";
    case EmptyArmPolicy::Pool: return "(pool)";
    case EmptyArmPolicy::Prior: return "(prior)";
  }
  return "";
}

inline std::string imputer_id(const ImputerMethod& method) {
  return std::visit(
      [](const auto& m) -> std::string {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, MeanImputer>) {
          return "mean" + policy_suffix(m.empty_arm);
        } else if constexpr (std::is_same_v<M, StrataImputer>) {
          return "strata" + policy_suffix(m.empty_arm);
        } else if constexpr (std::is_same_v<M, OlsImputer>) {
          return m.include_intercept ? "ols" : "ols(no-intercept)";
        } else {
          return "forest(" + to_string(m.mode) + ",trees=" + std::to_string(m.params.n_trees) +
                 ",seed=" + std::to_string(m.params.seed) + ")";
        }
      },
      method);
}

/// Imputed potential outcomes for a single target unit.
struct PotentialPair {
  double t_hat = 0.0;
  double c_hat = 0.0;
  bool rank_deficient = false;
  bool pooled = false;
};

namespace detail {

inline Eigen::MatrixXd select_rows(const Eigen::MatrixXd& z, std::span<const std::size_t> rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), z.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = z.row(static_cast<Eigen::Index>(rows[r]));
  return out;
}

// Leave-one-out sums of Y per arm within each group. For unit i the sum and
// count cover the other members of i's group only; unit i never enters them.
struct LooArmSums {
  std::vector<double> sum[2];
  std::vector<std::size_t> count[2];
  std::vector<double> all_sum;
  std::vector<std::size_t> all_count;
};

template <class Labels>
LooArmSums loo_arm_sums(const Experiment& exp, const Labels& labels) {
  const std::size_t n = exp.size();
  LooArmSums out;
  for (int a = 0; a < 2; ++a) {
    out.sum[a].assign(n, 0.0);
    out.count[a].assign(n, 0);
  }
  out.all_sum.assign(n, 0.0);
  out.all_count.assign(n, 0);

  for (const auto& [label, members] : group_by(labels)) {
    (void)label;
    CompensatedSum before[2];
    std::size_t before_n[2] = {0, 0};
    std::vector<CompensatedSum> prefix_state[2];
    for (int a = 0; a < 2; ++a) prefix_state[a].resize(members.size());
    std::vector<std::size_t> prefix_n[2] = {std::vector<std::size_t>(members.size()),
                                            std::vector<std::size_t>(members.size())};
    for (std::size_t k = 0; k < members.size(); ++k) {
      const auto i = members[k];
      for (int a = 0; a < 2; ++a) {
        prefix_state[a][k] = before[a];
        prefix_n[a][k] = before_n[a];
      }
      const int arm = exp.t[i];
      before[arm].add(exp.y[i]);
      ++before_n[arm];
    }
    CompensatedSum after[2];
    std::size_t after_n[2] = {0, 0};
    for (std::size_t k = members.size(); k-- > 0;) {
      const auto i = members[k];
      for (int a = 0; a < 2; ++a) {
        CompensatedSum s = prefix_state[a][k];
        s.add(after[a].value());
        out.sum[a][i] = s.value();
        out.count[a][i] = prefix_n[a][k] + after_n[a];
      }
      out.all_sum[i] = out.sum[0][i] + out.sum[1][i];
      out.all_count[i] = out.count[0][i] + out.count[1][i];
      const int arm = exp.t[i];
      after[arm].add(exp.y[i]);
      ++after_n[arm];
    }
  }
  return out;
}

struct SingleGroup {
  std::size_t n;
  std::size_t size() const { return n; }
  std::int64_t operator[](std::size_t) const { return 0; }
};

// Shared body of impute_mean / impute_strata. `labels` == nullptr means one
// group covering all units.
inline ImputedOutcomes grouped_loo_means(const Experiment& exp, const std::vector<std::int64_t>* labels,
                                         EmptyArmPolicy policy, double prior, const std::string& id) {
  const std::size_t n = exp.size();
  const LooArmSums global = loo_arm_sums(exp, SingleGroup{n});
  const LooArmSums local = labels ? loo_arm_sums(exp, *labels) : global;

  ImputedOutcomes out;
  out.imputer_id = id;
  out.t_hat.resize(n);
  out.c_hat.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    bool pooled = false;
    for (int a = 0; a < 2; ++a) {
      double value;
      if (local.count[a][i] > 0) {
        value = local.sum[a][i] / static_cast<double>(local.count[a][i]);
      } else if (policy == EmptyArmPolicy::Error) {
        if (labels) {
          throw Error(ErrorKind::StratumTooSmall,
                      "stratum " + std::to_string((*labels)[i]) + " has no other " +
                          (a == 1 ? "treated" : "control") + " unit for unit " + std::to_string(i));
        }
        throw Error(ErrorKind::InsufficientArm, std::string("no other ") + (a == 1 ? "treated" : "control") +
                                                    " unit available for unit " + std::to_string(i));
      } else if (policy == EmptyArmPolicy::Prior) {
        pooled = true;
        value = prior;
      } else if (global.count[a][i] > 0) {
        pooled = true;
        value = global.sum[a][i] / static_cast<double>(global.count[a][i]);
      } else {
        pooled = true;
        value = global.all_sum[i] / static_cast<double>(global.all_count[i]);
      }
      (a == 1 ? out.t_hat[i] : out.c_hat[i]) = value;
    }
    out.pooled_fallbacks += pooled ? 1 : 0;
  }
  finalize_m(exp, out);
  return out;
}

inline std::uint64_t arm_seed(std::uint64_t seed, int arm) { return stream_seed(seed, 0xa4u, arm); }

inline PotentialPair ols_fit_predict(const Experiment& exp, std::span<const std::size_t> rows,
                                     std::size_t target, const OlsImputer& cfg) {
  const auto q = static_cast<Eigen::Index>(exp.n_covariates());
  const Eigen::Index offset = cfg.include_intercept ? 1 : 0;
  const Eigen::Index cols = offset + 1 + q;
  const auto m = static_cast<Eigen::Index>(rows.size());
  if (m == 0) throw Error(ErrorKind::InsufficientArm, "OLS imputation has no training rows");

  Eigen::MatrixXd design(m, cols);
  Eigen::VectorXd response(m);
  for (Eigen::Index r = 0; r < m; ++r) {
    const auto i = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)]);
    if (cfg.include_intercept) design(r, 0) = 1.0;
    design(r, offset) = exp.t[static_cast<std::size_t>(i)];
    if (q > 0) design.block(r, offset + 1, 1, q) = exp.z.row(i);
    response(r) = exp.y[static_cast<std::size_t>(i)];
  }
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(design);
  const bool deficient = cod.rank() < cols;
  if (deficient && !cfg.allow_fallback)
    throw Error(ErrorKind::RankDeficient, "OLS design is rank deficient when predicting unit " +
                                              std::to_string(target) + " (rank " + std::to_string(cod.rank()) +
                                              " < " + std::to_string(cols) + ")");
  const Eigen::VectorXd beta = cod.solve(response);

  double base = cfg.include_intercept ? beta(0) : 0.0;
  if (q > 0) base += exp.z.row(static_cast<Eigen::Index>(target)).dot(beta.tail(q));
  return PotentialPair{base + beta(offset), base, deficient, false};
}

inline PotentialPair mean_fit_predict(const Experiment& exp, std::span<const std::size_t> rows,
                                      std::size_t target, EmptyArmPolicy policy,
                                      const std::vector<std::int64_t>* labels, double prior = 0.0) {
  CompensatedSum local[2], global[2];
  std::size_t local_n[2] = {0, 0}, global_n[2] = {0, 0};
  for (auto k : rows) {
    const int arm = exp.t[k];
    global[arm].add(exp.y[k]);
    ++global_n[arm];
    if (!labels || (*labels)[k] == (*labels)[target]) {
      local[arm].add(exp.y[k]);
      ++local_n[arm];
    }
  }
  PotentialPair out;
  for (int a = 0; a < 2; ++a) {
    double value;
    if (local_n[a] > 0) {
      value = local[a].value() / static_cast<double>(local_n[a]);
    } else if (policy == EmptyArmPolicy::Error) {
      if (labels)
        throw Error(ErrorKind::StratumTooSmall, "stratum " + std::to_string((*labels)[target]) +
                                                    " has no " + (a == 1 ? "treated" : "control") +
                                                    " training unit for unit " + std::to_string(target));
      throw Error(ErrorKind::InsufficientArm, std::string("no ") + (a == 1 ? "treated" : "control") +
                                                  " training unit for unit " + std::to_string(target));
    } else if (policy == EmptyArmPolicy::Prior) {
      out.pooled = true;
      value = prior;
    } else if (global_n[a] > 0) {
      out.pooled = true;
      value = global[a].value() / static_cast<double>(global_n[a]);
    } else if (global_n[1 - a] > 0) {
      out.pooled = true;
      value = global[1 - a].value() / static_cast<double>(global_n[1 - a]);
    } else {
      throw Error(ErrorKind::InsufficientArm, "no training units for unit " + std::to_string(target));
    }
    (a == 1 ? out.t_hat : out.c_hat) = value;
  }
  return out;
}

inline std::vector<double> gather(const std::vector<double>& values, std::span<const std::size_t> idx) {
  std::vector<double> out(idx.size());
  for (std::size_t k = 0; k < idx.size(); ++k) out[k] = values[idx[k]];
  return out;
}

inline PotentialPair forest_fit_predict(const Experiment& exp, std::span<const std::size_t> rows,
                                        std::size_t target, const ForestImputer& cfg) {
  if (exp.n_covariates() == 0) return mean_fit_predict(exp, rows, target, EmptyArmPolicy::Error, nullptr);
  std::vector<std::size_t> arm_rows[2];
  for (auto k : rows) arm_rows[exp.t[k]].push_back(k);
  PotentialPair out;
  const auto z_target = exp.z.row(static_cast<Eigen::Index>(target));
  for (int a = 0; a < 2; ++a) {
    if (arm_rows[a].size() < 2)
      throw Error(ErrorKind::InsufficientArm, "forest refit needs at least 2 training units per arm");
    ForestParams params = cfg.params;
    params.seed = arm_seed(cfg.params.seed, a);
    const Forest forest = fit_forest(select_rows(exp.z, arm_rows[a]), gather(exp.y, arm_rows[a]), params);
    (a == 1 ? out.t_hat : out.c_hat) = forest.predict(z_target);
  }
  return out;
}

}  // namespace detail

/// Imputes (t_hat, c_hat) for `target` using only the `training` units.
/// This is the refit primitive behind random drop and the covariance
/// estimator. Forest imputers always refit here, whatever their mode.
inline PotentialPair fit_predict(const Experiment& exp, const ImputerMethod& method,
                                 std::span<const std::size_t> training, std::size_t target) {
  return std::visit(
      [&](const auto& m) -> PotentialPair {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, MeanImputer>) {
          return detail::mean_fit_predict(exp, training, target, m.empty_arm, nullptr, m.prior);
        } else if constexpr (std::is_same_v<M, StrataImputer>) {
          if (m.labels.size() != exp.size())
            throw Error(ErrorKind::InvalidExperiment, "stratum labels must cover every unit");
          return detail::mean_fit_predict(exp, training, target, m.empty_arm, &m.labels, m.prior);
        } else if constexpr (std::is_same_v<M, OlsImputer>) {
          return detail::ols_fit_predict(exp, training, target, m);
        } else {
          return detail::forest_fit_predict(exp, training, target, m);
        }
      },
      method);
}

/// All units except those in `excluded` (which must be sorted).
inline std::vector<std::size_t> complement(std::size_t n, std::span<const std::size_t> excluded) {
  std::vector<std::size_t> out;
  out.reserve(n);
  std::size_t e = 0;
  for (std::size_t i = 0; i < n; ++i) {
    while (e < excluded.size() && excluded[e] < i) ++e;
    if (e < excluded.size() && excluded[e] == i) continue;
    out.push_back(i);
  }
  return out;
}

/// Arm means of the other units: t_hat_i is the mean treated outcome
/// excluding i, c_hat_i the mean control outcome excluding i.
inline ImputedOutcomes impute_mean(const Experiment& exp, EmptyArmPolicy policy = EmptyArmPolicy::Error,
                                   double prior = 0.0) {
  return detail::grouped_loo_means(exp, nullptr, policy, prior, imputer_id(MeanImputer{policy, prior}));
}

/// Leave-one-out arm means within each stratum (post-stratification).
inline ImputedOutcomes impute_strata(const Experiment& exp, const std::vector<std::int64_t>& labels,
                                     EmptyArmPolicy policy = EmptyArmPolicy::Error, double prior = 0.0) {
  if (labels.size() != exp.size())
    throw Error(ErrorKind::InvalidExperiment, "stratum labels must cover every unit");
  if (policy == EmptyArmPolicy::Error) {
    for (const auto& [label, members] : detail::group_by(labels)) {
      std::size_t treated = 0;
      for (auto i : members) treated += exp.t[i];
      const std::size_t control = members.size() - treated;
      if (treated < 2 || control < 2)
        throw Error(ErrorKind::StratumTooSmall, "stratum " + std::to_string(label) + " has " +
                                                    std::to_string(treated) + " treated and " +
                                                    std::to_string(control) +
                                                    " control units; at least 2 of each are required");
    }
  }
  return detail::grouped_loo_means(exp, &labels, policy, prior, imputer_id(StrataImputer{labels, policy, prior}));
}

/// Regress Y on [1, T, Z] without unit i; predict at (T=1, Z_i) and (T=0, Z_i).
inline ImputedOutcomes impute_ols(const Experiment& exp, const OlsImputer& cfg = {}, std::size_t threads = 0) {
  const std::size_t n = exp.size();
  ImputedOutcomes out;
  out.imputer_id = imputer_id(cfg);
  out.t_hat.resize(n);
  out.c_hat.resize(n);
  std::vector<char> deficient(n, 0);
  parallel_for(n, threads, [&](std::size_t i) {
    const std::size_t excluded[] = {i};
    const auto rows = complement(n, excluded);
    const auto fit = detail::ols_fit_predict(exp, rows, i, cfg);
    out.t_hat[i] = fit.t_hat;
    out.c_hat[i] = fit.c_hat;
    deficient[i] = fit.rank_deficient ? 1 : 0;
  });
  for (char d : deficient) out.rank_deficient_fits += static_cast<std::size_t>(d);
  finalize_m(exp, out);
  return out;
}

/// One forest per arm on (Z -> Y). A unit's own-arm outcome comes from the
/// out-of-bag prediction (or a forest refit without it); the opposite-arm
/// outcome from the other arm's forest, which never contains the unit.
inline ImputedOutcomes impute_forest(const Experiment& exp, const ForestImputer& cfg) {
  const std::size_t n = exp.size();
  if (exp.n_treated() < 2 || exp.n_control() < 2)
    throw Error(ErrorKind::InsufficientArm, "forest imputation needs at least 2 units in each arm");
  if (exp.n_covariates() == 0) {
    auto out = impute_mean(exp);
    out.imputer_id = imputer_id(cfg) + "->mean(q=0)";
    return out;
  }

  const std::vector<std::size_t> arm_units[2] = {exp.control_units(), exp.treated_units()};
  std::vector<Forest> forests;
  forests.reserve(2);
  for (int a = 0; a < 2; ++a) {
    ForestParams params = cfg.params;
    params.seed = detail::arm_seed(cfg.params.seed, a);
    forests.push_back(fit_forest(detail::select_rows(exp.z, arm_units[a]), detail::gather(exp.y, arm_units[a]),
                                 params));
  }

  ImputedOutcomes out;
  out.imputer_id = imputer_id(cfg);
  out.t_hat.resize(n);
  out.c_hat.resize(n);
  for (int a = 0; a < 2; ++a) {
    const auto& units = arm_units[a];
    const Forest& own = forests[static_cast<std::size_t>(a)];
    const Forest& other = forests[static_cast<std::size_t>(1 - a)];
    std::vector<double> own_pred(units.size());
    if (cfg.mode == ForestMode::Oob) {
      try {
        own_pred = own.predict_oob_all();
      } catch (const Error& e) {
        throw Error(ErrorKind::NoOobTrees, std::string(e.what()) + " (arm " + (a == 1 ? "treated" : "control") +
                                               "; local indices refer to that arm's units in order)");
      }
    } else {
      ForestParams params = cfg.params;
      params.seed = detail::arm_seed(cfg.params.seed, a);
      const std::size_t outer = resolve_threads(cfg.params.n_threads);
      params.n_threads = 1;
      parallel_for(units.size(), outer, [&](std::size_t k) {
        std::vector<std::size_t> rest;
        rest.reserve(units.size() - 1);
        for (std::size_t r = 0; r < units.size(); ++r)
          if (r != k) rest.push_back(units[r]);
        const Forest refit = fit_forest(detail::select_rows(exp.z, rest), detail::gather(exp.y, rest), params);
        own_pred[k] = refit.predict(exp.z.row(static_cast<Eigen::Index>(units[k])));
      });
    }
    for (std::size_t k = 0; k < units.size(); ++k) {
      const auto i = units[k];
      const double opposite = other.predict(exp.z.row(static_cast<Eigen::Index>(i)));
      if (a == 1) {
        out.t_hat[i] = own_pred[k];
        out.c_hat[i] = opposite;
      } else {
        out.c_hat[i] = own_pred[k];
        out.t_hat[i] = opposite;
      }
    }
  }
  finalize_m(exp, out);
  return out;
}

/// Plain leave-one-out imputation (no random drop).
inline ImputedOutcomes impute_loo(const Experiment& exp, const ImputerMethod& method) {
  return std::visit(
      [&](const auto& m) -> ImputedOutcomes {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, MeanImputer>) {
          return impute_mean(exp, m.empty_arm, m.prior);
        } else if constexpr (std::is_same_v<M, StrataImputer>) {
          return impute_strata(exp, m.labels, m.empty_arm, m.prior);
        } else if constexpr (std::is_same_v<M, OlsImputer>) {
          return impute_ols(exp, m);
        } else {
          return impute_forest(exp, m);
        }
      },
      method);
}

}  // namespace loop
