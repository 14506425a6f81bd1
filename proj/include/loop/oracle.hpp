#pragma once

// Ground truth: full potential-outcomes tables and exact moments of the
// estimator over the whole randomization distribution.

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "loop/common.hpp"
#include "loop/core.hpp"
#include "loop/designs.hpp"
#include "loop/imputers.hpp"
#include "loop/variance.hpp"

namespace loop {

struct PotentialOutcomesTable {
  std::vector<double> t;
  std::vector<double> c;
  Eigen::MatrixXd z;
  std::vector<double> p;
  Design design = Bernoulli{};

  std::size_t size() const { return t.size(); }
  double tau(std::size_t i) const { return t[i] - c[i]; }
  double m(std::size_t i) const { return (1.0 - p[i]) * t[i] + p[i] * c[i]; }

  double tau_bar() const {
    CompensatedSum s;
    for (std::size_t i = 0; i < size(); ++i) s.add(tau(i));
    return s.value() / static_cast<double>(size());
  }

  /// Observed data under `assignment`: Y_i = t_i if treated, c_i otherwise.
  Experiment realize(std::span<const std::uint8_t> assignment) const {
    if (assignment.size() != size()) throw Error(ErrorKind::Domain, "assignment length does not match the table");
    Experiment exp;
    exp.y.resize(size());
    exp.t.assign(assignment.begin(), assignment.end());
    for (std::size_t i = 0; i < size(); ++i) exp.y[i] = assignment[i] ? t[i] : c[i];
    exp.z = z.rows() == 0 && z.cols() == 0 ? Eigen::MatrixXd(static_cast<Eigen::Index>(size()), 0) : z;
    exp.p = p;
    exp.design = design;
    return exp;
  }
};

inline void validate(const PotentialOutcomesTable& po) {
  const std::size_t n = po.size();
  if (n < 4) throw Error(ErrorKind::InvalidExperiment, "a table needs at least 4 units");
  if (po.c.size() != n || po.p.size() != n)
    throw Error(ErrorKind::InvalidExperiment, "table columns have different lengths");
  if (po.z.size() != 0 && static_cast<std::size_t>(po.z.rows()) != n)
    throw Error(ErrorKind::InvalidExperiment, "covariate rows do not match the table");
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(po.t[i]) || !std::isfinite(po.c[i]))
      throw Error(ErrorKind::InvalidExperiment, "potential outcomes must be finite (unit " + std::to_string(i) + ")");
    if (!(po.p[i] > 0.0 && po.p[i] < 1.0))
      throw Error(ErrorKind::ProbabilityOutOfRange, "p must lie in (0,1) (unit " + std::to_string(i) + ")");
  }
}

// ---------------------------------------------------------------------------
// Assignment support
// ---------------------------------------------------------------------------

/// Every assignment the design can produce, with its probability. The design
/// factors into independent groups (units, the whole sample, blocks or pairs);
/// assignment k is decoded as a mixed-radix number over those groups.
class AssignmentSupport {
 public:
  struct Option {
    std::uint64_t bits;  // bit r set: r-th group member treated
    double probability;
  };
  struct Group {
    std::vector<std::size_t> members;
    std::vector<Option> options;
  };

  AssignmentSupport(const PotentialOutcomesTable& po, std::uint64_t cap) : n_(po.size()) {
    validate(po);
    std::visit([&](const auto& d) { build(po, d, cap); }, po.design);
  }

  std::size_t units() const { return n_; }
  std::uint64_t size() const { return size_; }
  const std::vector<Group>& groups() const { return groups_; }

  /// Writes assignment k into `out` and returns its probability.
  double decode(std::uint64_t k, std::vector<std::uint8_t>& out) const {
    out.assign(n_, 0);
    double prob = 1.0;
    for (const auto& g : groups_) {
      const auto& opt = g.options[k % g.options.size()];
      k /= g.options.size();
      for (std::size_t r = 0; r < g.members.size(); ++r) out[g.members[r]] = (opt.bits >> r) & 1u;
      prob *= opt.probability;
    }
    return prob;
  }

 private:
  void grow(std::uint64_t factor, std::uint64_t cap) {
    if (factor == 0 || size_ > cap / factor)
      throw Error(ErrorKind::SupportTooLarge,
                  "assignment support exceeds the enumeration cap of " + std::to_string(cap));
    size_ *= factor;
  }

  static std::uint64_t choose(std::uint64_t n, std::uint64_t k, std::uint64_t cap) {
    if (k > n) return 0;
    k = std::min(k, n - k);
    unsigned __int128 r = 1;
    for (std::uint64_t i = 1; i <= k; ++i) {
      r = r * (n - k + i) / i;
      if (r > cap) return cap + 1;
    }
    return static_cast<std::uint64_t>(r);
  }

  void add_combinations(std::vector<std::size_t> members, std::size_t treated, std::uint64_t cap) {
    const std::size_t m = members.size();
    if (m > 63) throw Error(ErrorKind::SupportTooLarge, "a group with more than 63 units cannot be enumerated");
    const auto count = choose(m, treated, cap);
    grow(count, cap);
    Group g{std::move(members), {}};
    g.options.reserve(static_cast<std::size_t>(count));
    const double prob = 1.0 / static_cast<double>(count);
    if (treated == 0) {
      g.options.push_back({0, 1.0});
    } else {
      // Gosper's hack walks the m-bit masks with `treated` bits in increasing order.
      std::uint64_t mask = (std::uint64_t{1} << treated) - 1;
      const std::uint64_t limit = std::uint64_t{1} << m;
      while (mask < limit) {
        g.options.push_back({mask, prob});
        const std::uint64_t low = mask & (~mask + 1);
        const std::uint64_t ripple = mask + low;
        mask = (((ripple ^ mask) >> 2) / low) | ripple;
      }
    }
    groups_.push_back(std::move(g));
  }

  void build(const PotentialOutcomesTable& po, const Bernoulli&, std::uint64_t cap) {
    for (std::size_t i = 0; i < n_; ++i) {
      grow(2, cap);
      groups_.push_back(Group{{i}, {{0, 1.0 - po.p[i]}, {1, po.p[i]}}});
    }
  }

  void build(const PotentialOutcomesTable&, const CompleteRandomization& d, std::uint64_t cap) {
    if (d.n_treated < 2 || d.n_treated + 2 > n_)
      throw Error(ErrorKind::InvalidExperiment, "complete randomization needs 2 <= n <= N-2");
    std::vector<std::size_t> all(n_);
    for (std::size_t i = 0; i < n_; ++i) all[i] = i;
    add_combinations(std::move(all), d.n_treated, cap);
  }

  void build(const PotentialOutcomesTable&, const Blocked& d, std::uint64_t cap) {
    if (d.block.size() != n_) throw Error(ErrorKind::InvalidExperiment, "block labels must cover every unit");
    for (auto& [label, members] : detail::group_by(d.block)) {
      const auto it = d.treated.find(label);
      if (it == d.treated.end())
        throw Error(ErrorKind::InvalidExperiment,
                    "enumeration needs the treated count of block " + std::to_string(label));
      if (it->second < 1 || it->second + 1 > members.size())
        throw Error(ErrorKind::InvalidExperiment,
                    "block " + std::to_string(label) + " needs at least one treated and one control unit");
      add_combinations(members, it->second, cap);
    }
  }

  void build(const PotentialOutcomesTable&, const Paired& d, std::uint64_t cap) {
    if (d.pair.size() != n_) throw Error(ErrorKind::InvalidExperiment, "pair labels must cover every unit");
    for (auto& [label, members] : detail::group_by(d.pair)) {
      if (members.size() != 2)
        throw Error(ErrorKind::InvalidExperiment, "pair " + std::to_string(label) + " does not have 2 members");
      grow(2, cap);
      groups_.push_back(Group{members, {{1, 0.5}, {2, 0.5}}});
    }
  }

  std::size_t n_ = 0;
  std::uint64_t size_ = 1;
  std::vector<Group> groups_;
};

inline std::string assignment_string(std::span<const std::uint8_t> assignment) {
  std::string s;
  for (auto a : assignment) s.push_back(a ? 'T' : 'C');
  return s;
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

struct OracleOptions {
  std::uint64_t cap = std::uint64_t{1} << 20;
  bool pairwise = false;
  bool allow_conditioning = false;  // skip assignments where the imputer is undefined
  std::size_t threads = 0;
};

struct OracleUnit {
  double tau = 0.0;
  double m = 0.0;
  double mean_tau_hat = 0.0;  // E[tau_hat_i]
  double var_tau_hat = 0.0;   // Var(tau_hat_i)
  double mse_m = 0.0;         // E[(m_hat_i - m_i)^2]
  double mse_t = 0.0;
  double mse_c = 0.0;
  double var_mu = 0.0;  // Var(m_hat_i U_i)
};

struct OracleSummary {
  double tau_bar = 0.0;
  double mean_tau_hat = 0.0;
  double var_tau_hat = 0.0;
  std::vector<OracleUnit> per_unit;
  std::optional<Eigen::MatrixXd> gamma;    // Cov(m_hat_i U_i, m_hat_j U_j); diagonal holds variances
  std::optional<Eigen::MatrixXd> rho;      // the matching correlations
  std::optional<Eigen::MatrixXd> cov_tau;  // Cov(tau_hat_i, tau_hat_j)
  std::uint64_t support_size = 0;
  std::uint64_t defined_count = 0;
  double total_probability = 0.0;    // enumerated probability mass (1 up to rounding)
  double defined_probability = 0.0;  // mass of assignments where the imputer is defined
  bool conditioned = false;
  // E[M_t], E[M_c] with the Np / N(1-p) denominators (constant p only).
  std::optional<double> expected_m_t_tilde;
  std::optional<double> expected_m_c_tilde;
  // E[var_hat] over assignments with at least one unit per arm.
  std::optional<double> expected_var_hat;
};

namespace detail {

struct OracleAccumulator {
  CompensatedSum weight, d1, d2;
  std::vector<CompensatedSum> a1, a2, mse_m, mse_t, mse_c, x1, x2;
  std::vector<CompensatedSum> xx, aa;  // row-major N x N, only with pairwise
  CompensatedSum mt_tilde, mc_tilde, var_weight, var_hat;
  double support_weight = 0.0;
  std::uint64_t defined = 0;

  OracleAccumulator(std::size_t n, bool pairwise)
      : a1(n), a2(n), mse_m(n), mse_t(n), mse_c(n), x1(n), x2(n) {
    if (pairwise) {
      xx.resize(n * n);
      aa.resize(n * n);
    }
  }
};

inline bool undefined_kind(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InsufficientArm:
    case ErrorKind::StratumTooSmall:
    case ErrorKind::EmptyOppositeArm:
    case ErrorKind::NoOobTrees:
    case ErrorKind::RankDeficient:
      return true;
    default:
      return false;
  }
}

}  // namespace detail

/// Exact probability-weighted moments of the LOOP estimator under `spec`
/// across every assignment of the table's design. Moments are normalized by
/// the enumerated (or, when conditioning, the defined) probability mass.
inline OracleSummary enumerate_oracle(const PotentialOutcomesTable& po, const ImputerSpec& spec,
                                      const OracleOptions& options = {}) {
  const AssignmentSupport support(po, options.cap);
  const std::size_t n = po.size();
  const double tau_bar = po.tau_bar();
  const auto p_const = constant_probability(po.p);

  // Fixed chunking keeps the reduction order independent of the thread count.
  const std::uint64_t chunks = std::min<std::uint64_t>(support.size(), 256);
  std::vector<detail::OracleAccumulator> acc(static_cast<std::size_t>(chunks),
                                             detail::OracleAccumulator(n, options.pairwise));

  parallel_for(static_cast<std::size_t>(chunks), options.threads, [&](std::size_t ch) {
    auto& A = acc[ch];
    const std::uint64_t begin = support.size() * ch / chunks;
    const std::uint64_t end = support.size() * (ch + 1) / chunks;
    std::vector<std::uint8_t> assignment;
    std::vector<double> a(n), x(n);
    for (std::uint64_t k = begin; k < end; ++k) {
      const double w = support.decode(k, assignment);
      A.support_weight += w;
      const Experiment exp = po.realize(assignment);
      ImputedOutcomes imp;
      try {
        imp = impute(exp, spec);
      } catch (const Error& e) {
        if (!detail::undefined_kind(e.kind())) throw;
        if (options.allow_conditioning) continue;
        throw Error(ErrorKind::UndefinedOnAssignment, "imputer undefined on assignment " + std::to_string(k) +
                                                          " (" + assignment_string(assignment) + "): " + e.what());
      }
      ++A.defined;
      A.weight.add(w);
      CompensatedSum tau_sum;
      CompensatedSum sq_t, sq_c;
      std::size_t n_t = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double u = signed_weight(exp.treated(i), exp.p[i]);
        const double tau_i = unit_effect(exp.y[i], imp.m_hat[i], u);
        tau_sum.add(tau_i);
        a[i] = tau_i - po.tau(i);
        x[i] = imp.m_hat[i] * u;
        const double em = imp.m_hat[i] - po.m(i);
        const double et = imp.t_hat[i] - po.t[i];
        const double ec = imp.c_hat[i] - po.c[i];
        A.a1[i].add(w * a[i]);
        A.a2[i].add(w * a[i] * a[i]);
        A.mse_m[i].add(w * em * em);
        A.mse_t[i].add(w * et * et);
        A.mse_c[i].add(w * ec * ec);
        A.x1[i].add(w * x[i]);
        A.x2[i].add(w * x[i] * x[i]);
        if (exp.treated(i)) {
          const double e = imp.t_hat[i] - exp.y[i];
          sq_t.add(e * e);
          ++n_t;
        } else {
          const double e = imp.c_hat[i] - exp.y[i];
          sq_c.add(e * e);
        }
      }
      const double d = tau_sum.value() / static_cast<double>(n) - tau_bar;
      A.d1.add(w * d);
      A.d2.add(w * d * d);
      if (options.pairwise) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            A.xx[i * n + j].add(w * x[i] * x[j]);
            A.aa[i * n + j].add(w * a[i] * a[j]);
          }
      }
      if (p_const) {
        const double N = static_cast<double>(n);
        A.mt_tilde.add(w * sq_t.value() / (N * *p_const));
        A.mc_tilde.add(w * sq_c.value() / (N * (1.0 - *p_const)));
        if (n_t > 0 && n_t < n) {
          const double mt = sq_t.value() / static_cast<double>(n_t);
          const double mc = sq_c.value() / static_cast<double>(n - n_t);
          A.var_weight.add(w);
          A.var_hat.add(w * variance_bound(mt, mc, *p_const, n));
        }
      }
    }
  });

  // Ordered reduction.
  detail::OracleAccumulator total(n, options.pairwise);
  for (const auto& A : acc) {
    total.support_weight += A.support_weight;
    total.defined += A.defined;
    total.weight.add(A.weight.value());
    total.d1.add(A.d1.value());
    total.d2.add(A.d2.value());
    for (std::size_t i = 0; i < n; ++i) {
      total.a1[i].add(A.a1[i].value());
      total.a2[i].add(A.a2[i].value());
      total.mse_m[i].add(A.mse_m[i].value());
      total.mse_t[i].add(A.mse_t[i].value());
      total.mse_c[i].add(A.mse_c[i].value());
      total.x1[i].add(A.x1[i].value());
      total.x2[i].add(A.x2[i].value());
    }
    for (std::size_t k = 0; k < total.xx.size(); ++k) {
      total.xx[k].add(A.xx[k].value());
      total.aa[k].add(A.aa[k].value());
    }
    total.mt_tilde.add(A.mt_tilde.value());
    total.mc_tilde.add(A.mc_tilde.value());
    total.var_weight.add(A.var_weight.value());
    total.var_hat.add(A.var_hat.value());
  }

  OracleSummary out;
  out.tau_bar = tau_bar;
  out.support_size = support.size();
  out.defined_count = total.defined;
  out.total_probability = total.support_weight;
  out.defined_probability = total.weight.value();
  out.conditioned = total.defined < support.size();
  const double W = out.defined_probability;
  if (!(W > 0.0)) throw Error(ErrorKind::UndefinedOnAssignment, "the imputer is undefined on every assignment");

  const double e_d = total.d1.value() / W;
  out.mean_tau_hat = tau_bar + e_d;
  out.var_tau_hat = total.d2.value() / W - e_d * e_d;
  out.per_unit.resize(n);
  std::vector<double> e_x(n), e_a(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& u = out.per_unit[i];
    u.tau = po.tau(i);
    u.m = po.m(i);
    e_a[i] = total.a1[i].value() / W;
    e_x[i] = total.x1[i].value() / W;
    u.mean_tau_hat = u.tau + e_a[i];
    u.var_tau_hat = total.a2[i].value() / W - e_a[i] * e_a[i];
    u.mse_m = total.mse_m[i].value() / W;
    u.mse_t = total.mse_t[i].value() / W;
    u.mse_c = total.mse_c[i].value() / W;
    u.var_mu = total.x2[i].value() / W - e_x[i] * e_x[i];
  }
  if (options.pairwise) {
    const auto N = static_cast<Eigen::Index>(n);
    Eigen::MatrixXd gamma(N, N), rho(N, N), cov_tau(N, N);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const auto I = static_cast<Eigen::Index>(i), J = static_cast<Eigen::Index>(j);
        gamma(I, J) = total.xx[i * n + j].value() / W - e_x[i] * e_x[j];
        cov_tau(I, J) = total.aa[i * n + j].value() / W - e_a[i] * e_a[j];
      }
    for (Eigen::Index i = 0; i < N; ++i)
      for (Eigen::Index j = 0; j < N; ++j) {
        const double denom = std::sqrt(gamma(i, i) * gamma(j, j));
        rho(i, j) = denom > 0.0 ? gamma(i, j) / denom : 0.0;
      }
    out.gamma = std::move(gamma);
    out.rho = std::move(rho);
    out.cov_tau = std::move(cov_tau);
  }
  if (p_const) {
    out.expected_m_t_tilde = total.mt_tilde.value() / W;
    out.expected_m_c_tilde = total.mc_tilde.value() / W;
    if (total.var_weight.value() > 0.0) out.expected_var_hat = total.var_hat.value() / total.var_weight.value();
  }
  return out;
}

/// Calls body(assignment, probability) for every assignment, in order.
/// Single-threaded; meant for small checks written against the oracle.
inline void for_each_assignment(const PotentialOutcomesTable& po,
                                const std::function<void(const std::vector<std::uint8_t>&, double)>& body,
                                std::uint64_t cap = std::uint64_t{1} << 20) {
  const AssignmentSupport support(po, cap);
  std::vector<std::uint8_t> assignment;
  for (std::uint64_t k = 0; k < support.size(); ++k) {
    const double w = support.decode(k, assignment);
    body(assignment, w);
  }
}

}  // namespace loop
