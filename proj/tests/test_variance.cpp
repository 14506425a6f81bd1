#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <set>

#include "support.hpp"

using Catch::Approx;
using loop::ErrorKind;
using testing::make_experiment;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const loop::Error& e) {
    return e.kind();
  }
  FAIL("expected a loop::Error");
  return ErrorKind::Io;
}

}  // namespace

TEST_CASE("mse_hats with the mean imputer", "[variance]") {
  const auto exp = make_experiment({3, 5, 1, 2, 3}, {1, 1, 0, 0, 0});
  const auto imp = loop::impute_mean(exp);
  const auto m = loop::mse_hats(exp, imp);
  CHECK(m.m_t_hat == 4.0);
  CHECK(m.m_c_hat == Approx(1.5).epsilon(1e-15));
  // n/(n-1)^2 * sum (Y - mean)^2 = 2/1 * (1 + 1)
  CHECK(m.m_t_hat == Approx(2.0 / 1.0 * 2.0).epsilon(1e-15));

  const auto e = loop::mse_hats(exp, imp, loop::MseDenominator::Expected);
  CHECK(e.m_t_hat == Approx(8.0 / 2.5).epsilon(1e-15));
  CHECK(e.m_c_hat == Approx(4.5 / 2.5).epsilon(1e-15));
}

TEST_CASE("mse_hats edge cases", "[variance]") {
  const auto exp = make_experiment({3, 5, 1, 2, 3}, {1, 1, 0, 0, 0});
  loop::ImputedOutcomes perfect;
  perfect.t_hat = exp.y;
  perfect.c_hat = exp.y;
  loop::finalize_m(exp, perfect);
  const auto m = loop::mse_hats(exp, perfect);
  CHECK(m.m_t_hat == 0.0);
  CHECK(m.m_c_hat == 0.0);

  const auto all_control = make_experiment({1, 2, 3, 4}, {0, 0, 0, 0});
  loop::ImputedOutcomes imp;
  imp.t_hat = imp.c_hat = all_control.y;
  loop::finalize_m(all_control, imp);
  CHECK(kind_of([&] { loop::mse_hats(all_control, imp); }) == ErrorKind::InsufficientArm);

  auto hetero = exp;
  hetero.p[0] = 0.3;
  CHECK(kind_of([&] { loop::mse_hats(hetero, perfect, loop::MseDenominator::Expected); }) ==
        ErrorKind::NonConstantP);
  CHECK(kind_of([&] { loop::estimate_variance(hetero, perfect); }) == ErrorKind::NonConstantP);
}

TEST_CASE("variance_bound", "[variance]") {
  CHECK(loop::variance_bound(4, 1.5, 0.5, 5) == Approx(1.1 + 0.4 * std::sqrt(6.0)).epsilon(1e-14));
  CHECK(loop::variance_bound(4, 1.5, 0.5, 5) == Approx(2.07980).margin(5e-6));
  CHECK(loop::variance_bound(0, 0, 0.3, 17) == 0.0);
  for (double M : {0.5, 2.0, 9.0}) CHECK(loop::variance_bound(M, M, 0.5, 8) == Approx(4 * M / 8).epsilon(1e-14));

  // Direct substitution at an asymmetric p.
  const double p = 0.3, mt = 2.0, mc = 0.7;
  CHECK(loop::variance_bound(mt, mc, p, 10) ==
        Approx(((1 - p) / p * mt + p / (1 - p) * mc + 2 * std::sqrt(mt * mc)) / 10).epsilon(1e-14));

  double prev = 0;
  for (double mt_i = 0; mt_i < 5; mt_i += 0.25) {
    const double v = loop::variance_bound(mt_i, 1.0, 0.4, 10);
    CHECK(v >= prev);
    prev = v;
  }
  CHECK(kind_of([] { loop::variance_bound(-1, 1, 0.5, 4); }) == ErrorKind::Domain);
  CHECK(kind_of([] { loop::variance_bound(1, 1, 1.0, 4); }) == ErrorKind::Domain);
}

TEST_CASE("M_t of the mean imputer is a rescaled sample variance", "[variance][property]") {
  std::mt19937_64 rng(99);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t N = 4 + rng() % 40;
    const std::size_t n = 2 + rng() % (N - 3);
    const auto exp = testing::random_experiment(rng, N, n, 0.5);
    const auto m = loop::mse_hats(exp, loop::impute_mean(exp));
    double mean = 0;
    for (std::size_t i = 0; i < N; ++i)
      if (exp.t[i]) mean += exp.y[i] / static_cast<double>(n);
    double ss = 0;
    for (std::size_t i = 0; i < N; ++i)
      if (exp.t[i]) ss += (exp.y[i] - mean) * (exp.y[i] - mean);
    const double dn = static_cast<double>(n);
    CHECK(testing::rel_close(m.m_t_hat, dn / ((dn - 1) * (dn - 1)) * ss, 1e-12));
  }
}

TEST_CASE("cov_hat_pair by hand", "[variance]") {
  const auto exp = make_experiment({3, 5, 1, 2, 3, 4}, {1, 1, 0, 0, 0, 1});
  // i = 0 treated, j = 2 control: (c_0^{-2} - c_0^{+2}) (t_2^{+0} - t_2^{-0})
  // c_0^{+2} = mean{1,2,3} = 2, c_0^{-2} = mean{2,3} = 2.5
  // t_2^{+0} = mean{3,5,4} = 4, t_2^{-0} = mean{5,4} = 4.5
  const double expected = (2.5 - 2.0) * (4.0 - 4.5);
  CHECK(loop::cov_hat_pair(exp, loop::MeanImputer{}, 0, 2) == Approx(expected).epsilon(1e-14));
  CHECK(loop::cov_hat_pair(exp, loop::MeanImputer{}, 2, 0) == Approx(expected).epsilon(1e-14));

  // Both treated: (1-p)^2/p^2 (t_0^{+1} - t_0^{-1}) (t_1^{+0} - t_1^{-0}) with p = 1/2.
  const double both = (4.5 - 4.0) * (3.5 - 4.0);
  CHECK(loop::cov_hat_pair(exp, loop::MeanImputer{}, 0, 1) == Approx(both).epsilon(1e-14));

  const auto flat = make_experiment({2, 2, 2, 2, 2, 2}, {1, 1, 0, 0, 0, 1});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      if (i != j) CHECK(loop::cov_hat_pair(flat, loop::MeanImputer{}, i, j) == 0.0);

  CHECK(kind_of([&] { loop::cov_hat_pair(exp, loop::MeanImputer{}, 1, 1); }) == ErrorKind::Domain);
  loop::ForestImputer oob;
  CHECK(kind_of([&] { loop::cov_hat_pair(exp, oob, 0, 1); }) == ErrorKind::UnsupportedImputer);
}

TEST_CASE("gamma_bar_hat", "[variance]") {
  std::mt19937_64 rng(31);
  const auto exp = testing::random_experiment(rng, 8, 4, 0.5);
  const auto all = loop::gamma_bar_hat(exp, loop::MeanImputer{});
  REQUIRE(all.gamma_hat.size() == 28);
  CHECK(all.total_pairs == 28);
  double sum = 0;
  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto& g : all.gamma_hat) {
    CHECK(g.i < g.j);
    seen.insert({g.i, g.j});
    const double direct = loop::cov_hat_pair(exp, loop::MeanImputer{}, g.i, g.j);
    CHECK(g.value == Approx(direct).epsilon(1e-13).margin(1e-15));
    CHECK(g.value == Approx(loop::cov_hat_pair(exp, loop::MeanImputer{}, g.j, g.i)).epsilon(1e-13).margin(1e-15));
    sum += direct;
  }
  CHECK(seen.size() == 28);
  CHECK(all.gamma_bar_hat == Approx(sum / 28).epsilon(1e-12).margin(1e-15));
  CHECK(all.refits == 8 + 2 * 28);

  const auto sub = loop::gamma_bar_hat(exp, loop::MeanImputer{}, 10, 5);
  CHECK(sub.gamma_hat.size() == 10);
  const auto sub2 = loop::gamma_bar_hat(exp, loop::MeanImputer{}, 10, 5);
  CHECK(sub.gamma_bar_hat == sub2.gamma_bar_hat);
  std::set<std::pair<std::size_t, std::size_t>> distinct;
  for (const auto& g : sub.gamma_hat) distinct.insert({g.i, g.j});
  CHECK(distinct.size() == 10);

  auto flat = exp;
  std::fill(flat.y.begin(), flat.y.end(), 1.0);
  CHECK(loop::gamma_bar_hat(flat, loop::MeanImputer{}).gamma_bar_hat == 0.0);

  // Larger instance: the pair term is small next to the bound (recorded only).
  const auto ten = testing::random_experiment(rng, 10, 5, 0.5);
  const auto diag = loop::gamma_bar_hat(ten, loop::MeanImputer{});
  const double bound = loop::estimate_variance(ten, loop::impute_mean(ten)).var_hat;
  CHECK(std::isfinite(diag.gamma_bar_hat));
  CHECK(bound > 0);
  INFO("|gamma_bar| (N-1) = " << std::abs(diag.gamma_bar_hat) * 9 << ", N var_hat = " << 10 * bound);
}

TEST_CASE("cov_hat_pair is unbiased over every assignment", "[variance][oracle]") {
  std::mt19937_64 rng(404);
  for (int rep = 0; rep < 3; ++rep) {
    const auto po = testing::random_table(rng, 8, 0.5);
    const loop::MeanImputer method{loop::EmptyArmPolicy::Prior, 0.0};
    loop::OracleOptions opts;
    opts.pairwise = true;
    const auto oracle = loop::enumerate_oracle(po, loop::ImputerSpec{method, {}}, opts);

    Eigen::MatrixXd expected_cov = Eigen::MatrixXd::Zero(8, 8);
    loop::for_each_assignment(po, [&](const std::vector<std::uint8_t>& a, double w) {
      const auto exp = po.realize(a);
      for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = i + 1; j < 8; ++j)
          expected_cov(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) +=
              w * loop::cov_hat_pair(exp, method, i, j);
    });
    for (Eigen::Index i = 0; i < 8; ++i)
      for (Eigen::Index j = i + 1; j < 8; ++j)
        CHECK(expected_cov(i, j) == Approx((*oracle.gamma)(i, j)).margin(1e-10));
  }
}

TEST_CASE("Np denominators give exactly unbiased MSE estimates", "[variance][oracle]") {
  std::mt19937_64 rng(505);
  for (double p : {0.5, 0.3}) {
    const auto po = testing::random_table(rng, 8, p);
    const auto oracle =
        loop::enumerate_oracle(po, loop::ImputerSpec{loop::MeanImputer{loop::EmptyArmPolicy::Pool}, {}});
    double target_t = 0, target_c = 0;
    for (const auto& u : oracle.per_unit) {
      target_t += u.mse_t / 8;
      target_c += u.mse_c / 8;
    }
    CHECK(*oracle.expected_m_t_tilde == Approx(target_t).epsilon(1e-10));
    CHECK(*oracle.expected_m_c_tilde == Approx(target_c).epsilon(1e-10));
  }
}

TEST_CASE("MSE of m_hat respects the blended bound", "[variance][oracle]") {
  std::mt19937_64 rng(606);
  const auto po = testing::random_table(rng, 8, 0.5, 1);
  for (const loop::ImputerMethod& method :
       {loop::ImputerMethod{loop::MeanImputer{loop::EmptyArmPolicy::Pool}}, loop::ImputerMethod{loop::OlsImputer{}}}) {
    const auto oracle = loop::enumerate_oracle(po, loop::ImputerSpec{method, {}});
    for (const auto& u : oracle.per_unit) {
      const double p = 0.5;
      const double bound =
          (1 - p) * (1 - p) * u.mse_t + p * p * u.mse_c + 2 * p * (1 - p) * std::sqrt(u.mse_t * u.mse_c);
      CHECK(u.mse_m <= bound * (1 + 1e-12) + 1e-14);
    }
  }
}
