#pragma once

// Simulation generators and the Monte Carlo harness.
//
// A harness run fixes (or regenerates) a potential-outcomes table, draws
// assignment vectors, and scores each estimator by its bias, its mean
// nominal standard error and the spread of its point estimates.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "loop/common.hpp"
#include "loop/core.hpp"
#include "loop/designs.hpp"
#include "loop/estimator.hpp"
#include "loop/imputers.hpp"
#include "loop/oracle.hpp"

namespace loop {

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

/// 30 units, one covariate Z in {0, 1, 2} with 10 units each. Potential
/// outcomes are normal with SD 0.1 around (c, t) means (0, 1), (1, 1), (1, 2).
inline PotentialOutcomesTable gen_sim1(std::uint64_t seed) {
  constexpr std::size_t per_group = 10;
  constexpr double sd = 0.1;
  constexpr double control_mean[3] = {0.0, 1.0, 1.0};
  constexpr double treated_mean[3] = {1.0, 1.0, 2.0};
  Rng rng = make_stream(seed, 0x51);
  std::normal_distribution<double> noise(0.0, sd);

  PotentialOutcomesTable po;
  const std::size_t n = 3 * per_group;
  po.z.resize(static_cast<Eigen::Index>(n), 1);
  po.t.resize(n);
  po.c.resize(n);
  po.p.assign(n, 0.5);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t g = i / per_group;
    po.z(static_cast<Eigen::Index>(i), 0) = static_cast<double>(g);
    po.c[i] = control_mean[g] + noise(rng);
    po.t[i] = treated_mean[g] + noise(rng);
  }
  return po;
}

/// Group probabilities for the binary-response simulation: weights
/// (1, exp(c z / 2), exp(c z)), normalized.
inline std::array<double, 3> sim2_group_probabilities(double z1, double c) {
  // Divide through by the largest weight so large |c z| cannot overflow.
  const double logs[3] = {0.0, 0.5 * c * z1, c * z1};
  const double top = std::max({logs[0], logs[1], logs[2]});
  std::array<double, 3> w{};
  double total = 0.0;
  for (int j = 0; j < 3; ++j) total += (w[static_cast<std::size_t>(j)] = std::exp(logs[j] - top));
  for (auto& v : w) v /= total;
  return w;
}

/// Binary-response table. Groups: (c, t) = (0, 0), (0, 1), (1, 1). Z_1 is the
/// only predictive covariate; columns 2..k+1 are independent noise.
///
/// Z_1 and the group draws come from one stream and each noise column from
/// its own, so tables that differ only in k share everything else.
inline PotentialOutcomesTable gen_sim2(std::size_t n_units, std::size_t k, double c, std::uint64_t seed) {
  if (n_units < 10) throw Error(ErrorKind::Domain, "simulation 2 needs at least 10 units");
  if (!(c > 0.0) || !std::isfinite(c)) throw Error(ErrorKind::Domain, "signal strength c must be positive");
  constexpr double control_by_group[3] = {0.0, 0.0, 1.0};
  constexpr double treated_by_group[3] = {0.0, 1.0, 1.0};

  PotentialOutcomesTable po;
  const auto rows = static_cast<Eigen::Index>(n_units);
  po.z.resize(rows, static_cast<Eigen::Index>(k + 1));
  po.t.resize(n_units);
  po.c.resize(n_units);
  po.p.assign(n_units, 0.5);

  Rng main = make_stream(seed, 0x52, 0);
  std::normal_distribution<double> normal;
  for (std::size_t i = 0; i < n_units; ++i) {
    const double z1 = normal(main);
    const auto probs = sim2_group_probabilities(z1, c);
    const double u = uniform01(main);
    const std::size_t g = u < probs[0] ? 0 : (u < probs[0] + probs[1] ? 1 : 2);
    po.z(static_cast<Eigen::Index>(i), 0) = z1;
    po.c[i] = control_by_group[g];
    po.t[i] = treated_by_group[g];
  }
  for (std::size_t j = 0; j < k; ++j) {
    Rng column = make_stream(seed, 0x52, j + 1);
    std::normal_distribution<double> col_normal;
    for (Eigen::Index i = 0; i < rows; ++i) po.z(i, static_cast<Eigen::Index>(j + 1)) = col_normal(column);
  }
  return po;
}

// ---------------------------------------------------------------------------
// Estimators
// ---------------------------------------------------------------------------

struct EstimatorResult {
  double point = 0.0;
  double variance = 0.0;  // nominal
};

/// Point estimate and nominal variance from one realized experiment. The
/// seed argument is distinct per replication, for estimators that randomize.
using EstimatorFn = std::function<EstimatorResult(const Experiment&, std::uint64_t)>;

struct NamedEstimator {
  std::string name;
  EstimatorFn fn;
};

/// Coefficient on T from OLS of Y on [1, T, Z], with the textbook variance
/// sigma^2 (X'X)^{-1}_TT, sigma^2 = RSS / (N - columns).
inline EstimatorResult ols_baseline(const Experiment& exp) {
  const auto n = static_cast<Eigen::Index>(exp.size());
  const auto q = static_cast<Eigen::Index>(exp.n_covariates());
  const Eigen::Index cols = 2 + q;
  if (n <= cols) throw Error(ErrorKind::RankDeficient, "OLS baseline needs more units than columns");
  Eigen::MatrixXd x(n, cols);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    x(i, 0) = 1.0;
    x(i, 1) = exp.t[static_cast<std::size_t>(i)];
    if (q > 0) x.block(i, 2, 1, q) = exp.z.row(i);
    y(i) = exp.y[static_cast<std::size_t>(i)];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  if (qr.rank() < cols)
    throw Error(ErrorKind::RankDeficient, "OLS baseline design has rank " + std::to_string(qr.rank()) + " < " +
                                              std::to_string(cols));
  const Eigen::VectorXd beta = qr.solve(y);
  const double rss = (y - x * beta).squaredNorm();
  const double sigma2 = rss / static_cast<double>(n - cols);
  Eigen::VectorXd unit = Eigen::VectorXd::Zero(cols);
  unit(1) = 1.0;
  const Eigen::VectorXd col = (x.transpose() * x).ldlt().solve(unit);
  return {beta(1), sigma2 * col(1)};
}

/// Difference in arm means with the Neyman variance s_t^2/n + s_c^2/(N-n).
inline EstimatorResult simple_difference_with_variance(const Experiment& exp) {
  require_two_per_arm(exp);
  double variance = 0.0;
  for (int arm = 0; arm < 2; ++arm) {
    std::vector<double> ys;
    for (std::size_t i = 0; i < exp.size(); ++i)
      if (exp.t[i] == arm) ys.push_back(exp.y[i]);
    const double mean = mean_of(ys);
    CompensatedSum ss;
    for (double v : ys) ss.add((v - mean) * (v - mean));
    variance += ss.value() / static_cast<double>(ys.size() - 1) / static_cast<double>(ys.size());
  }
  return {simple_difference(exp), variance};
}

inline NamedEstimator simple_difference_estimator() {
  return {"simple_difference", [](const Experiment& exp, std::uint64_t) {
            return simple_difference_with_variance(exp);
          }};
}

inline NamedEstimator ols_estimator() {
  return {"ols", [](const Experiment& exp, std::uint64_t) { return ols_baseline(exp); }};
}

/// LOOP with the given imputer. Forest seeds are replaced per replication.
inline NamedEstimator loop_estimator(ImputerMethod method, std::string name = "loop",
                                     MseDenominator denominator = MseDenominator::ArmCount) {
  return {std::move(name), [method = std::move(method), denominator](const Experiment& exp, std::uint64_t seed) {
            ImputerMethod m = method;
            if (auto* f = std::get_if<ForestImputer>(&m)) f->params.seed = stream_seed(f->params.seed, seed);
            EstimateOptions options;
            options.denominator = denominator;
            const auto report = loop_estimate(exp, impute_loo(exp, m), options);
            return EstimatorResult{report.tau_hat, report.var_hat()};
          }};
}

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

enum class DrawMode { Random, Exhaustive };

struct MonteCarloOptions {
  std::size_t reps = 1000;
  std::uint64_t seed = 0;
  DrawMode draw = DrawMode::Random;
  std::size_t max_resamples = 1000;  // per replication
  std::size_t threads = 0;
  std::uint64_t cap = std::uint64_t{1} << 20;  // exhaustive mode only
};

struct EstimatorSummary {
  std::string name;
  double mean_point = 0.0;
  double bias = 0.0;
  double bias_mc_se = 0.0;  // true_se / sqrt(reps); 0 under exhaustive draws
  double mean_nominal_se = 0.0;
  double true_se = 0.0;  // SD of (point - tau_bar)
};

struct MonteCarloSummary {
  std::vector<EstimatorSummary> estimators;
  std::size_t reps = 0;
  std::uint64_t seed = 0;
  std::size_t resamples = 0;
  double tau_bar = 0.0;  // average over replications when tables are regenerated
  bool regenerated = false;
  std::map<std::string, double> axis;

  const EstimatorSummary& at(const std::string& name) const {
    for (const auto& e : estimators)
      if (e.name == name) return e;
    throw Error(ErrorKind::Domain, "no estimator named " + name);
  }
};

using TableGenerator = std::function<PotentialOutcomesTable(std::uint64_t)>;

/// One assignment drawn from the table's design.
inline std::vector<std::uint8_t> draw_assignment(const PotentialOutcomesTable& po, Rng& rng) {
  const std::size_t n = po.size();
  std::vector<std::uint8_t> out(n, 0);
  auto fill_group = [&](std::vector<std::size_t> members, std::size_t treated) {
    for (std::size_t r = 0; r < treated; ++r) {
      const std::size_t pick = r + uniform_index(rng, members.size() - r);
      std::swap(members[r], members[pick]);
      out[members[r]] = 1;
    }
  };
  std::visit(
      [&](const auto& d) {
        using D = std::decay_t<decltype(d)>;
        if constexpr (std::is_same_v<D, Bernoulli>) {
          for (std::size_t i = 0; i < n; ++i) out[i] = uniform01(rng) < po.p[i] ? 1 : 0;
        } else if constexpr (std::is_same_v<D, CompleteRandomization>) {
          std::vector<std::size_t> all(n);
          std::iota(all.begin(), all.end(), std::size_t{0});
          fill_group(std::move(all), d.n_treated);
        } else if constexpr (std::is_same_v<D, Blocked>) {
          for (auto& [label, members] : detail::group_by(d.block)) {
            const auto it = d.treated.find(label);
            if (it == d.treated.end())
              throw Error(ErrorKind::InvalidExperiment, "no treated count for block " + std::to_string(label));
            fill_group(members, it->second);
          }
        } else {
          for (auto& [label, members] : detail::group_by(d.pair)) fill_group(members, 1);
        }
      },
      po.design);
  return out;
}

namespace detail {

struct RepOutcome {
  std::vector<EstimatorResult> results;
  double tau_bar = 0.0;
  double weight = 1.0;
  std::size_t resamples = 0;
};

inline bool undefined_estimate(const Error& e) { return undefined_kind(e.kind()); }

inline MonteCarloSummary summarize(const std::vector<NamedEstimator>& estimators,
                                   const std::vector<RepOutcome>& reps, const MonteCarloOptions& options,
                                   bool weighted) {
  MonteCarloSummary out;
  out.reps = reps.size();
  out.seed = options.seed;
  CompensatedSum weight_sum, tau_sum;
  for (const auto& r : reps) {
    weight_sum.add(r.weight);
    tau_sum.add(r.weight * r.tau_bar);
    out.resamples += r.resamples;
  }
  const double W = weight_sum.value();
  out.tau_bar = tau_sum.value() / W;
  for (std::size_t e = 0; e < estimators.size(); ++e) {
    CompensatedSum point, err, se;
    for (const auto& r : reps) {
      point.add(r.weight * r.results[e].point);
      err.add(r.weight * (r.results[e].point - r.tau_bar));
      se.add(r.weight * std::sqrt(std::max(r.results[e].variance, 0.0)));
    }
    const double bias = err.value() / W;
    CompensatedSum ss;
    for (const auto& r : reps) {
      const double d = r.results[e].point - r.tau_bar - bias;
      ss.add(r.weight * d * d);
    }
    EstimatorSummary s;
    s.name = estimators[e].name;
    s.mean_point = point.value() / W;
    s.bias = bias;
    s.mean_nominal_se = se.value() / W;
    if (weighted) {
      s.true_se = std::sqrt(ss.value() / W);
      s.bias_mc_se = 0.0;
    } else {
      const auto n = static_cast<double>(reps.size());
      s.true_se = reps.size() > 1 ? std::sqrt(ss.value() / (n - 1.0)) : 0.0;
      s.bias_mc_se = s.true_se / std::sqrt(n);
    }
    out.estimators.push_back(std::move(s));
  }
  return out;
}

inline RepOutcome run_rep(const PotentialOutcomesTable& po, const std::vector<NamedEstimator>& estimators,
                          std::uint64_t seed, std::size_t rep, std::size_t max_resamples) {
  RepOutcome out;
  out.tau_bar = po.tau_bar();
  for (std::size_t attempt = 0;; ++attempt) {
    Rng rng = make_stream(seed, 0xa551, rep, attempt);
    const Experiment exp = po.realize(draw_assignment(po, rng));
    try {
      out.results.clear();
      for (const auto& est : estimators) out.results.push_back(est.fn(exp, stream_seed(seed, 0xe571, rep)));
      out.resamples = attempt;
      return out;
    } catch (const Error& e) {
      if (!undefined_estimate(e)) throw;
      if (attempt + 1 >= max_resamples)
        throw Error(e.kind(), "replication " + std::to_string(rep) + " stayed undefined after " +
                                  std::to_string(max_resamples) + " draws: " + e.what());
    }
  }
}

}  // namespace detail

/// Fixed table: every replication redraws only the assignment. Assignments on
/// which an estimator is undefined are redrawn and counted in `resamples`.
/// Exhaustive mode visits each assignment once, weighted by its probability,
/// so the summary holds exact moments.
inline MonteCarloSummary monte_carlo(const PotentialOutcomesTable& po, const std::vector<NamedEstimator>& estimators,
                                     const MonteCarloOptions& options) {
  validate(po);
  if (estimators.empty()) throw Error(ErrorKind::Domain, "monte_carlo needs at least one estimator");
  std::vector<detail::RepOutcome> reps;
  if (options.draw == DrawMode::Exhaustive) {
    const AssignmentSupport support(po, options.cap);
    reps.resize(static_cast<std::size_t>(support.size()));
    const double tau_bar = po.tau_bar();
    parallel_for(reps.size(), options.threads, [&](std::size_t k) {
      std::vector<std::uint8_t> assignment;
      auto& r = reps[k];
      r.weight = support.decode(k, assignment);
      r.tau_bar = tau_bar;
      const Experiment exp = po.realize(assignment);
      for (const auto& est : estimators) r.results.push_back(est.fn(exp, stream_seed(options.seed, 0xe571, k)));
    });
    return detail::summarize(estimators, reps, options, true);
  }
  if (options.reps < 2) throw Error(ErrorKind::Domain, "monte_carlo needs at least 2 replications");
  reps.resize(options.reps);
  parallel_for(options.reps, options.threads, [&](std::size_t rep) {
    reps[rep] = detail::run_rep(po, estimators, options.seed, rep, options.max_resamples);
  });
  return detail::summarize(estimators, reps, options, false);
}

/// Regenerated tables: replication r draws a fresh table from
/// generator(stream_seed(seed, r)) and then one assignment; bias is measured
/// against each table's own average effect.
inline MonteCarloSummary monte_carlo(const TableGenerator& generator, const std::vector<NamedEstimator>& estimators,
                                     const MonteCarloOptions& options) {
  if (options.draw == DrawMode::Exhaustive)
    throw Error(ErrorKind::InvalidConfig, "exhaustive draws need a fixed table");
  if (options.reps < 2) throw Error(ErrorKind::Domain, "monte_carlo needs at least 2 replications");
  if (estimators.empty()) throw Error(ErrorKind::Domain, "monte_carlo needs at least one estimator");
  std::vector<detail::RepOutcome> reps(options.reps);
  parallel_for(options.reps, options.threads, [&](std::size_t rep) {
    const auto po = generator(stream_seed(options.seed, 0x7ab1e, rep));
    validate(po);
    reps[rep] = detail::run_rep(po, estimators, options.seed, rep, options.max_resamples);
  });
  auto out = detail::summarize(estimators, reps, options, false);
  out.regenerated = true;
  return out;
}

// ---------------------------------------------------------------------------
// Simulation 2 sweeps
// ---------------------------------------------------------------------------

enum class SweepAxis { NoiseCovariates, Units, Signal };

inline std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::NoiseCovariates: return "k";
    case SweepAxis::Units: return "n";
    case SweepAxis::Signal: return "c";
  }
  return "unknown";
}

inline std::vector<double> default_sweep_grid(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::NoiseCovariates: return {5, 25, 50, 100};
    case SweepAxis::Units: return {100, 300, 600, 1000};
    case SweepAxis::Signal: return {1, 2, 3, 4.5};
  }
  return {};
}

struct SweepOptions {
  SweepAxis axis = SweepAxis::NoiseCovariates;
  std::vector<double> values;  // empty: default grid
  std::size_t n_units = 200;
  std::size_t k = 50;
  double c = 3.0;
  std::size_t trials = 1000;
  std::uint64_t seed = 0;
  ForestParams forest;
  std::size_t threads = 0;
};

struct SweepPoint {
  double value = 0.0;
  MonteCarloSummary summary;
  std::vector<double> relative_true_se;     // true SE / simple-difference true SE
  std::vector<double> relative_nominal_se;  // mean nominal SE / simple-difference true SE
};

struct SweepResult {
  SweepAxis axis = SweepAxis::NoiseCovariates;
  std::vector<std::string> estimators;
  std::vector<SweepPoint> points;
};

/// The three estimators compared in the sweeps, simple difference first.
inline std::vector<NamedEstimator> sweep_estimators(const ForestParams& forest) {
  return {simple_difference_estimator(), loop_estimator(ForestImputer{forest, ForestMode::Oob}, "loop_forest"),
          ols_estimator()};
}

/// Each grid point draws one table (the same seed at every point, so
/// neighbouring points share Z_1, the groups and the leading noise columns)
/// and runs `trials` assignment replications on it.
inline SweepResult sweep_sim2(const SweepOptions& options) {
  SweepResult out;
  out.axis = options.axis;
  const auto values = options.values.empty() ? default_sweep_grid(options.axis) : options.values;
  const auto estimators = sweep_estimators(options.forest);
  for (const auto& e : estimators) out.estimators.push_back(e.name);
  for (double v : values) {
    std::size_t n_units = options.n_units, k = options.k;
    double c = options.c;
    switch (options.axis) {
      case SweepAxis::NoiseCovariates:
        if (v < 0 || v != std::floor(v)) throw Error(ErrorKind::Domain, "k grid values must be whole numbers");
        k = static_cast<std::size_t>(v);
        break;
      case SweepAxis::Units:
        if (v < 10 || v != std::floor(v)) throw Error(ErrorKind::Domain, "N grid values must be whole numbers >= 10");
        n_units = static_cast<std::size_t>(v);
        break;
      case SweepAxis::Signal:
        c = v;
        break;
    }
    const auto table = gen_sim2(n_units, k, c, options.seed);
    MonteCarloOptions mc;
    mc.reps = options.trials;
    mc.seed = options.seed;
    mc.threads = options.threads;
    SweepPoint point;
    point.value = v;
    point.summary = monte_carlo(table, estimators, mc);
    point.summary.axis = {{"n", static_cast<double>(n_units)}, {"k", static_cast<double>(k)}, {"c", c}};
    const double base = point.summary.estimators.front().true_se;
    for (const auto& s : point.summary.estimators) {
      point.relative_true_se.push_back(base > 0.0 ? s.true_se / base : std::nan(""));
      point.relative_nominal_se.push_back(base > 0.0 ? s.mean_nominal_se / base : std::nan(""));
    }
    out.points.push_back(std::move(point));
  }
  return out;
}

}  // namespace loop
