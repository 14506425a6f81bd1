#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>
#include <random>

#include "support.hpp"

using Catch::Approx;
using loop::Error;
using loop::ErrorKind;
using testing::make_experiment;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected a loop::Error");
  return ErrorKind::Io;
}

}  // namespace

TEST_CASE("signed_weight", "[core]") {
  CHECK(loop::signed_weight(true, 0.5) == 2.0);
  CHECK(loop::signed_weight(false, 0.5) == -2.0);
  CHECK(loop::signed_weight(false, 0.25) == Approx(-4.0 / 3.0).epsilon(1e-15));

  for (double p : {0.01, 0.1, 0.25, 0.3, 0.5, 0.7, 0.9, 0.99}) {
    const double e = p * loop::signed_weight(true, p) + (1 - p) * loop::signed_weight(false, p);
    CHECK(std::abs(e) < 1e-15);
  }
  for (double p : {0.0, 1.0, -0.1, 1.5, std::nan("")}) {
    CHECK(kind_of([&] { loop::signed_weight(true, p); }) == ErrorKind::Domain);
  }
}

TEST_CASE("combine_m", "[core]") {
  CHECK(loop::combine_m(2, 0, 0.5) == 1.0);
  CHECK(loop::combine_m(4, 4, 0.3) == Approx(4.0).epsilon(1e-15));
  CHECK(loop::combine_m(10, 0, 0.25) == 7.5);
  CHECK(kind_of([] { loop::combine_m(1, 1, 1.0); }) == ErrorKind::Domain);
}

TEST_CASE("unit_effect", "[core]") {
  CHECK(loop::unit_effect(3, 1, 2) == 4.0);
  CHECK(loop::unit_effect(5, 5, -2) == 0.0);

  // t = 4, c = 2, p = 1/2 and m_hat = m = 3: both arms give tau_i = 2.
  const double m = loop::combine_m(4, 2, 0.5);
  CHECK(m == 3.0);
  CHECK(loop::unit_effect(4, m, loop::signed_weight(true, 0.5)) == 2.0);
  CHECK(loop::unit_effect(2, m, loop::signed_weight(false, 0.5)) == 2.0);
}

TEST_CASE("simple_difference", "[core]") {
  CHECK(loop::simple_difference(make_experiment({3, 5, 1, 2, 3}, {1, 1, 0, 0, 0})) == 2.0);
  CHECK(loop::simple_difference(make_experiment({7, 7, 7, 7}, {1, 0, 1, 0})) == 0.0);
  CHECK(loop::simple_difference(make_experiment({1, 2, 3, 4}, {1, 0, 1, 0})) == -1.0);
  CHECK(kind_of([] { loop::simple_difference(make_experiment({1, 2, 3, 4}, {1, 1, 1, 1})); }) ==
        ErrorKind::InsufficientArm);
  CHECK(kind_of([] { loop::simple_difference(make_experiment({1, 2, 3, 4}, {0, 0, 0, 0})); }) ==
        ErrorKind::InsufficientArm);
}

TEST_CASE("loop_estimate on the five-unit example", "[core]") {
  const auto exp = make_experiment({3, 5, 1, 2, 3}, {1, 1, 0, 0, 0});
  const auto report = loop::loop_estimate(exp, loop::impute_mean(exp));

  // By hand: treated units see t_hat = the other treated outcome and
  // c_hat = 2; controls see t_hat = 4 and the mean of the other two controls.
  const double t_hat[] = {5, 3, 4, 4, 4};
  const double c_hat[] = {2, 2, 2.5, 2, 1.5};
  double sum = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    const double m = 0.5 * t_hat[i] + 0.5 * c_hat[i];
    const double tau_i = exp.t[i] ? 2 * (exp.y[i] - m) : -2 * (exp.y[i] - m);
    CHECK(report.tau_units[i] == Approx(tau_i).epsilon(1e-14));
    sum += tau_i;
  }
  CHECK(sum / 5 == Approx(2.0).epsilon(1e-14));
  CHECK(report.tau_hat == Approx(2.0).epsilon(1e-14));
  CHECK(report.n_treated == 2);
  CHECK(report.n_control == 3);
  CHECK(report.var_hat() == Approx(1.1 + 0.4 * std::sqrt(6.0)).epsilon(1e-12));
  CHECK(*report.se == Approx(std::sqrt(report.var_hat())).epsilon(1e-15));
  CHECK(report.ci->upper - report.tau_hat == Approx(report.tau_hat - report.ci->lower).epsilon(1e-12));
  CHECK(report.ci->upper - report.tau_hat == Approx(1.959963984540054 * *report.se).epsilon(1e-12));
}

TEST_CASE("perfect imputation recovers the unit effects with zero MSE", "[core]") {
  const std::vector<double> t = {4, 6, 1, 3, 8, 2};
  const std::vector<double> c = {2, 1, 1, 0, 5, 2};
  const std::vector<std::uint8_t> assign = {1, 0, 1, 0, 0, 1};
  std::vector<double> y(6);
  for (std::size_t i = 0; i < 6; ++i) y[i] = assign[i] ? t[i] : c[i];
  const auto exp = make_experiment(y, assign, 0.4);

  loop::ImputedOutcomes imputed;
  imputed.t_hat = t;
  imputed.c_hat = c;
  loop::finalize_m(exp, imputed);
  const auto report = loop::loop_estimate(exp, imputed);
  for (std::size_t i = 0; i < 6; ++i) CHECK(report.tau_units[i] == Approx(t[i] - c[i]).margin(1e-14));
  CHECK(report.m_t_hat() == 0.0);
  CHECK(report.m_c_hat() == 0.0);
  CHECK(report.var_hat() == 0.0);
}

TEST_CASE("loop_estimate preconditions", "[core]") {
  const auto one_treated = make_experiment({1, 2, 3, 4, 5}, {1, 0, 0, 0, 0});
  loop::ImputedOutcomes imputed = loop::impute_mean(one_treated, loop::EmptyArmPolicy::Pool);
  CHECK(kind_of([&] { loop::loop_estimate(one_treated, imputed); }) == ErrorKind::InsufficientArm);

  auto hetero = make_experiment({3, 5, 1, 2, 3}, {1, 1, 0, 0, 0});
  hetero.p = {0.5, 0.4, 0.5, 0.5, 0.5};
  const auto imp = loop::impute_mean(hetero);
  CHECK(kind_of([&] { loop::loop_estimate(hetero, imp); }) == ErrorKind::NonConstantP);

  loop::EstimateOptions point_only;
  point_only.variance = false;
  const auto report = loop::loop_estimate(hetero, imp, point_only);
  CHECK(!report.variance);
  CHECK(std::isfinite(report.tau_hat));

  point_only.ci_level = 1.0;
  CHECK(kind_of([&] { loop::loop_estimate(hetero, imp, point_only); }) == ErrorKind::Domain);
}

TEST_CASE("mean-imputer LOOP equals the simple difference", "[core][property]") {
  std::mt19937_64 rng(20240601);
  for (int rep = 0; rep < 300; ++rep) {
    const std::size_t N = 4 + rng() % 47;
    const std::size_t n = 2 + rng() % (N - 3);
    const double p = std::array{0.3, 0.5, 0.7}[rng() % 3];
    const auto exp = testing::random_experiment(rng, N, n, p);
    const auto report = loop::loop_estimate(exp, loop::impute_mean(exp));
    INFO("N=" << N << " n=" << n << " p=" << p);
    CHECK(testing::rel_close(report.tau_hat, loop::simple_difference(exp), 1e-10));
  }
}

TEST_CASE("tau_hat is invariant under permutation of units", "[core][property]") {
  std::mt19937_64 rng(77);
  for (int rep = 0; rep < 50; ++rep) {
    const auto exp = testing::random_experiment(rng, 12, 5, 0.5, 2);
    std::vector<std::size_t> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto shuffled = exp;
    for (std::size_t k = 0; k < 12; ++k) {
      shuffled.y[k] = exp.y[perm[k]];
      shuffled.t[k] = exp.t[perm[k]];
      shuffled.z.row(static_cast<Eigen::Index>(k)) = exp.z.row(static_cast<Eigen::Index>(perm[k]));
    }
    for (const loop::ImputerMethod& method :
         {loop::ImputerMethod{loop::MeanImputer{}}, loop::ImputerMethod{loop::OlsImputer{}}}) {
      const double a = loop::loop_estimate(exp, loop::impute_loo(exp, method)).tau_hat;
      const double b = loop::loop_estimate(shuffled, loop::impute_loo(shuffled, method)).tau_hat;
      CHECK(testing::rel_close(a, b, 1e-10));
    }
  }
}

TEST_CASE("tau_hat is the mean of the unit effects and m_hat the blend", "[core][property]") {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 50; ++rep) {
    auto exp = testing::random_experiment(rng, 20, 8, 0.5, 1);
    std::uniform_real_distribution<double> prob(0.1, 0.9);
    for (auto& p : exp.p) p = prob(rng);
    const auto imp = loop::impute_ols(exp);
    for (std::size_t i = 0; i < 20; ++i)
      CHECK(testing::rel_close(imp.m_hat[i], (1 - exp.p[i]) * imp.t_hat[i] + exp.p[i] * imp.c_hat[i], 1e-12));
    loop::EstimateOptions opts;
    opts.variance = false;
    const auto r = loop::loop_estimate(exp, imp, opts);
    double s = 0;
    for (double v : r.tau_units) s += v;
    CHECK(testing::rel_close(r.tau_hat, s / 20, 1e-12));
  }
}

TEST_CASE("validate rejects malformed experiments", "[core]") {
  auto ok = make_experiment({1, 2, 3, 4}, {1, 0, 1, 0});
  CHECK_NOTHROW(loop::validate(ok));

  CHECK(kind_of([] { loop::validate(make_experiment({1, 2, 3}, {1, 0, 1})); }) == ErrorKind::InvalidExperiment);

  auto bad_t = ok;
  bad_t.t[2] = 2;
  CHECK(kind_of([&] { loop::validate(bad_t); }) == ErrorKind::InvalidExperiment);

  auto bad_p = ok;
  bad_p.p[1] = 1.0;
  CHECK(kind_of([&] { loop::validate(bad_p); }) == ErrorKind::ProbabilityOutOfRange);

  auto bad_y = ok;
  bad_y.y[0] = std::nan("");
  CHECK(kind_of([&] { loop::validate(bad_y); }) == ErrorKind::InvalidExperiment);

  auto bad_z = ok;
  bad_z.z = Eigen::MatrixXd::Zero(4, 1);
  bad_z.z(2, 0) = std::nan("");
  CHECK(kind_of([&] { loop::validate(bad_z); }) == ErrorKind::InvalidExperiment);

  auto complete = make_experiment({1, 2, 3, 4, 5, 6}, {1, 1, 0, 0, 0, 0}, 0.5, loop::CompleteRandomization{3});
  CHECK(kind_of([&] { loop::validate(complete); }) == ErrorKind::InvalidExperiment);
  complete.design = loop::CompleteRandomization{2};
  CHECK_NOTHROW(loop::validate(complete));

  auto blocked = make_experiment({1, 2, 3, 4, 5, 6}, {1, 0, 1, 1, 0, 0}, 0.5, loop::Blocked{{0, 0, 1, 1, 1, 1}, {}});
  CHECK_NOTHROW(loop::validate(blocked));
  blocked.t = {1, 1, 1, 0, 0, 0};
  CHECK(kind_of([&] { loop::validate(blocked); }) == ErrorKind::InvalidExperiment);

  auto paired = make_experiment({1, 2, 3, 4}, {1, 0, 0, 1}, 0.5, loop::Paired{{7, 7, 9, 9}});
  CHECK_NOTHROW(loop::validate(paired));
  paired.t = {1, 1, 0, 0};
  CHECK(kind_of([&] { loop::validate(paired); }) == ErrorKind::InvalidExperiment);
  paired.design = loop::Paired{{1, 1, 1, 2}};
  CHECK(kind_of([&] { loop::validate(paired); }) == ErrorKind::InvalidExperiment);
}

TEST_CASE("compensated summation and keyed streams", "[core]") {
  loop::CompensatedSum s;
  s.add(1e16);
  s.add(1.0);
  s.add(-1e16);
  CHECK(s.value() == 1.0);

  CHECK(loop::stream_seed(1, 2, 3) == loop::stream_seed(1, 2, 3));
  CHECK(loop::stream_seed(1, 2, 3) != loop::stream_seed(1, 3, 2));
  auto a = loop::make_stream(9, 4);
  auto b = loop::make_stream(9, 4);
  CHECK(a() == b());

  std::vector<int> hits(1000, 0);
  loop::parallel_for(1000, 4, [&](std::size_t i) { ++hits[i]; });
  CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));

  // The lowest failing index is reported regardless of scheduling.
  try {
    loop::parallel_for(100, 4, [](std::size_t i) {
      if (i % 7 == 3) throw std::runtime_error(std::to_string(i));
    });
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()) == "3");
  }
}
