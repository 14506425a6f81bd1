#pragma once

// Neyman-Rubin data model and the per-unit estimator arithmetic.
//
// An Experiment holds what an analyst observes: outcomes Y, binary treatment
// indicators T, covariates Z, treatment probabilities p and the assignment
// design. Imputers turn it into ImputedOutcomes (leave-one-out predictions of
// both potential outcomes); the functions here combine those into unit-level
// effect estimates.

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "loop/common.hpp"

namespace loop {

// ---------------------------------------------------------------------------
// Designs
// ---------------------------------------------------------------------------

/// Independent assignments with per-unit probabilities taken from p.
struct Bernoulli {};

/// Exactly `n_treated` of the N units are treated.
struct CompleteRandomization {
  std::size_t n_treated = 0;
};

/// Fixed treated count inside every block. `treated` maps block label to
/// the number of treated units; an empty map means "as observed".
struct Blocked {
  std::vector<std::int64_t> block;
  std::map<std::int64_t, std::size_t> treated;
};

/// Pairs of units with exactly one treated member.
struct Paired {
  std::vector<std::int64_t> pair;
};

using Design = std::variant<Bernoulli, CompleteRandomization, Blocked, Paired>;

inline std::string design_name(const Design& d) {
  switch (d.index()) {
    case 0: return "bernoulli";
    case 1: return "complete";
    case 2: return "blocked";
    default: return "paired";
  }
}

inline bool is_dependent(const Design& d) { return !std::holds_alternative<Bernoulli>(d); }

// ---------------------------------------------------------------------------
// Experiment
// ---------------------------------------------------------------------------

struct Experiment {
  std::vector<double> y;
  std::vector<std::uint8_t> t;
  Eigen::MatrixXd z;  // N x q, q may be 0
  std::vector<double> p;
  Design design = Bernoulli{};

  std::size_t size() const { return y.size(); }
  std::size_t n_covariates() const { return static_cast<std::size_t>(z.cols()); }
  bool treated(std::size_t i) const { return t[i] != 0; }

  std::size_t n_treated() const {
    std::size_t n = 0;
    for (auto v : t) n += v;
    return n;
  }
  std::size_t n_control() const { return size() - n_treated(); }

  std::vector<std::size_t> treated_units() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (t[i]) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> control_units() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (!t[i]) out.push_back(i);
    return out;
  }
};

inline void check_probability(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw Error(ErrorKind::Domain, "treatment probability must lie strictly inside (0,1), got " +
                                       std::to_string(p));
  }
}

/// Returns the common p when every p_i is identical, nothing otherwise.
inline std::optional<double> constant_probability(std::span<const double> p) {
  if (p.empty()) return std::nullopt;
  for (double v : p)
    if (v != p.front()) return std::nullopt;
  return p.front();
}

namespace detail {

template <class Labels>
std::map<std::int64_t, std::vector<std::size_t>> group_by(const Labels& labels) {
  std::map<std::int64_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
  return groups;
}

}  // namespace detail

/// Checks every structural invariant of an experiment and its design.
inline void validate(const Experiment& exp) {
  const std::size_t n = exp.size();
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::InvalidExperiment, msg); };
  if (n < 4) fail("at least 4 units are required, got " + std::to_string(n));
  if (exp.t.size() != n || exp.p.size() != n || static_cast<std::size_t>(exp.z.rows()) != n)
    fail("y, t, p and the covariate matrix must have the same number of units");
  for (std::size_t i = 0; i < n; ++i) {
    if (exp.t[i] > 1) fail("treatment indicator of unit " + std::to_string(i) + " is not 0/1");
    if (!std::isfinite(exp.y[i])) fail("outcome of unit " + std::to_string(i) + " is not finite");
    if (!(exp.p[i] > 0.0 && exp.p[i] < 1.0))
      throw Error(ErrorKind::ProbabilityOutOfRange,
                  "p of unit " + std::to_string(i) + " is outside (0,1)");
  }
  if (!exp.z.allFinite()) fail("covariate matrix contains missing or non-finite values");

  std::visit(
      [&](const auto& d) {
        using D = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<D, CompleteRandomization>) {
          if (d.n_treated != exp.n_treated())
            fail("complete randomization expects " + std::to_string(d.n_treated) +
                 " treated units but " + std::to_string(exp.n_treated()) + " are treated");
          if (d.n_treated < 2 || d.n_treated + 2 > n)
            fail("complete randomization needs 2 <= n_treated <= N-2");
        } else if constexpr (std::is_same_v<D, Blocked>) {
          if (d.block.size() != n) fail("block labels must cover every unit");
          for (const auto& [label, members] : detail::group_by(d.block)) {
            std::size_t treated = 0;
            for (auto i : members) treated += exp.t[i];
            if (treated == 0 || treated == members.size())
              fail("block " + std::to_string(label) + " needs at least one treated and one control unit");
            if (!d.treated.empty()) {
              auto it = d.treated.find(label);
              if (it == d.treated.end() || it->second != treated)
                fail("block " + std::to_string(label) + " treated count does not match the design");
            }
          }
        } else if constexpr (std::is_same_v<D, Paired>) {
          if (d.pair.size() != n) fail("pair labels must cover every unit");
          for (const auto& [label, members] : detail::group_by(d.pair)) {
            if (members.size() != 2)
              fail("pair " + std::to_string(label) + " does not have exactly two members");
            if (exp.t[members[0]] == exp.t[members[1]])
              fail("pair " + std::to_string(label) + " members must have opposite assignments");
          }
        }
      },
      exp.design);
}

// ---------------------------------------------------------------------------
// Imputation results and per-unit arithmetic
// ---------------------------------------------------------------------------

/// Leave-one-out predictions of both potential outcomes for every unit.
struct ImputedOutcomes {
  std::vector<double> t_hat;
  std::vector<double> c_hat;
  std::vector<double> m_hat;
  std::string imputer_id;
  std::size_t rank_deficient_fits = 0;  // OLS minimum-norm fallbacks engaged
  std::size_t pooled_fallbacks = 0;     // empty-arm fallbacks engaged
};

/// Signed inverse probability weight: 1/p when treated, -1/(1-p) otherwise.
inline double signed_weight(bool treated, double p) {
  check_probability(p);
  return treated ? 1.0 / p : -1.0 / (1.0 - p);
}

/// Blend of the two imputed potential outcomes whose accuracy controls the
/// unit's variance: (1-p) t_hat + p c_hat.
inline double combine_m(double t_hat, double c_hat, double p) {
  check_probability(p);
  return (1.0 - p) * t_hat + p * c_hat;
}

inline double unit_effect(double y, double m_hat, double weight) { return (y - m_hat) * weight; }

/// Fills m_hat from t_hat, c_hat and the experiment's probabilities.
inline void finalize_m(const Experiment& exp, ImputedOutcomes& out) {
  out.m_hat.resize(exp.size());
  for (std::size_t i = 0; i < exp.size(); ++i)
    out.m_hat[i] = combine_m(out.t_hat[i], out.c_hat[i], exp.p[i]);
}

/// Per-unit effect estimates (Y_i - m_hat_i) U_i. No arm-size checks: callers
/// that need a defined LOOP estimate go through loop_estimate.
inline std::vector<double> unit_effects(const Experiment& exp, const ImputedOutcomes& imputed) {
  std::vector<double> tau(exp.size());
  for (std::size_t i = 0; i < exp.size(); ++i)
    tau[i] = unit_effect(exp.y[i], imputed.m_hat[i], signed_weight(exp.treated(i), exp.p[i]));
  return tau;
}

/// Treated mean minus control mean of the observed outcomes.
inline double simple_difference(const Experiment& exp) {
  CompensatedSum treated, control;
  std::size_t n_t = 0;
  for (std::size_t i = 0; i < exp.size(); ++i) {
    if (exp.treated(i)) {
      treated.add(exp.y[i]);
      ++n_t;
    } else {
      control.add(exp.y[i]);
    }
  }
  const std::size_t n_c = exp.size() - n_t;
  if (n_t == 0 || n_c == 0)
    throw Error(ErrorKind::InsufficientArm, "simple difference needs at least one unit in each arm");
  return treated.value() / static_cast<double>(n_t) - control.value() / static_cast<double>(n_c);
}

/// Throws InsufficientArm unless both arms hold at least two units; the LOOP
/// estimate is undefined when n is 0, 1, N-1 or N.
inline void require_two_per_arm(const Experiment& exp) {
  const auto n_t = exp.n_treated();
  const auto n_c = exp.size() - n_t;
  if (n_t < 2 || n_c < 2)
    throw Error(ErrorKind::InsufficientArm, "LOOP needs at least 2 treated and 2 control units (have " +
                                                std::to_string(n_t) + " treated, " + std::to_string(n_c) +
                                                " control)");
}

}  // namespace loop
