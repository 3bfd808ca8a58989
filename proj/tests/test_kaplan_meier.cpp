#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>
#include <vector>

#include "strataft/kaplan_meier.hpp"
#include "strataft/rng.hpp"
#include "test_helpers.hpp"

using namespace strataft;

TEST_CASE("weighted KM golden values") {
  SECTION("three events") {
    const auto surv = fit_weighted_km({1.0, 2.0, 3.0}, {1, 1, 1}, {1.0, 1.0, 1.0});
    REQUIRE(std::fabs(surv.cdf(2.5) - 2.0 / 3.0) <= 1e-12);
    REQUIRE(surv.tail_defect == Catch::Approx(0.0).margin(1e-15));
    REQUIRE(surv.total_mass_check == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("censored middle observation") {
    const auto surv = fit_weighted_km({1.0, 2.0, 3.0}, {1, 0, 1}, {1.0, 1.0, 1.0});
    REQUIRE(std::fabs(surv.cdf(2.5) - 1.0 / 3.0) <= 1e-12);
    REQUIRE(surv.n_jumps() == 2);
  }
  SECTION("largest residual censored leaves tail mass") {
    const auto surv = fit_weighted_km({1.0, 2.0, 3.0}, {1, 1, 0}, {1.0, 1.0, 1.0});
    REQUIRE(surv.tail_defect > 0.0);
    REQUIRE(surv.total_mass_check == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("multiplier identity") {
  const std::vector<double> e{0.3, -1.2, 0.7, 2.0, -0.4};
  const std::vector<char> d{1, 0, 1, 0, 1};
  const std::vector<double> w{2.0, 1.0, 3.0, 1.5, 1.0};
  const auto a = fit_weighted_km(e, d, w);
  const auto b = fit_weighted_km(e, d, w, {1.0, 1.0, 1.0, 1.0, 1.0});
  REQUIRE(a.jump_points == b.jump_points);
  REQUIRE(a.survival_after == b.survival_after);
}

TEST_CASE("degenerate survival error") {
  REQUIRE_THROWS_AS(fit_weighted_km({1.0, 2.0}, {0, 0}, {1.0, 1.0}), DataError);
  // events exist but carry zero weight
  REQUIRE_THROWS_AS(fit_weighted_km({1.0, 2.0}, {1, 0}, {0.0, 1.0}), DataError);
}

TEST_CASE("KM reduces to the ECDF on uncensored data, ties included") {
  auto rng = substream(21, 0);
  std::uniform_int_distribution<int> lattice(-4, 4);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int rep = 0; rep < 300; ++rep) {
    const int m = 1 + static_cast<int>(unif(rng) * 40);
    std::vector<double> e(m);
    const bool with_ties = rep % 2 == 0;
    for (auto& v : e) v = with_ties ? static_cast<double>(lattice(rng)) / 2.0 : unif(rng) * 4 - 2;
    const std::vector<char> d(m, 1);
    const std::vector<double> w(m, 1.0);
    const auto surv = fit_weighted_km(e, d, w);
    for (int t = 0; t < 12; ++t) {
      const double q = unif(rng) * 6 - 3;
      double ecdf = 0.0;
      for (double v : e) ecdf += v < q ? 1.0 : 0.0;
      ecdf /= m;
      REQUIRE(std::fabs(surv.cdf(q) - ecdf) <= 1e-12);
    }
  }
}

TEST_CASE("KM reduces to the weighted ECDF on weighted uncensored data") {
  auto rng = substream(22, 0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int rep = 0; rep < 100; ++rep) {
    const int m = 2 + static_cast<int>(unif(rng) * 30);
    std::vector<double> e(m), w(m);
    for (int q = 0; q < m; ++q) {
      e[static_cast<std::size_t>(q)] = unif(rng) * 4 - 2;
      w[static_cast<std::size_t>(q)] = 0.25 + 3 * unif(rng);
    }
    const std::vector<char> d(m, 1);
    const auto surv = fit_weighted_km(e, d, w);
    const double q = unif(rng) * 4 - 2;
    double num = 0.0, den = 0.0;
    for (int i = 0; i < m; ++i) {
      num += e[static_cast<std::size_t>(i)] < q ? w[static_cast<std::size_t>(i)] : 0.0;
      den += w[static_cast<std::size_t>(i)];
    }
    REQUIRE(std::fabs(surv.cdf(q) - num / den) <= 1e-12);
  }
}

TEST_CASE("KM weight-scale invariance and shape properties") {
  auto rng = substream(23, 0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int rep = 0; rep < 200; ++rep) {
    const int m = 2 + static_cast<int>(unif(rng) * 40);
    std::vector<double> e(m), w(m), w2(m);
    std::vector<char> d(m);
    bool any = false;
    const double c = 0.1 + 10 * unif(rng);
    for (int q = 0; q < m; ++q) {
      e[static_cast<std::size_t>(q)] = unif(rng) * 6 - 3;
      w[static_cast<std::size_t>(q)] = 0.25 + 3 * unif(rng);
      w2[static_cast<std::size_t>(q)] = c * w[static_cast<std::size_t>(q)];
      d[static_cast<std::size_t>(q)] = unif(rng) < 0.6 ? 1 : 0;
      any |= d[static_cast<std::size_t>(q)];
    }
    if (!any) d[0] = 1;
    const auto a = fit_weighted_km(e, d, w);
    const auto b = fit_weighted_km(e, d, w2);
    REQUIRE(a.n_jumps() == b.n_jumps());
    for (std::size_t j = 0; j < a.n_jumps(); ++j) {
      REQUIRE(std::fabs(a.survival_after[j] - b.survival_after[j]) <= 1e-12);
      // survival is non-increasing and within [0, 1]
      REQUIRE(a.survival_after[j] >= -1e-15);
      REQUIRE(a.survival_after[j] <= 1.0 + 1e-15);
      if (j > 0) REQUIRE(a.survival_after[j] <= a.survival_after[j - 1] + 1e-15);
    }
    REQUIRE(a.total_mass_check == Catch::Approx(1.0).margin(1e-10));
  }
}

TEST_CASE("conditional tail mean") {
  // masses 1/3 at -1 and 2/3 at 1
  const auto surv = fit_weighted_km({-1.0, 0.0, 1.0}, {1, 0, 1}, {1.0, 1.0, 1.0});
  SECTION("golden value") {
    REQUIRE(conditional_tail_mean(surv, 0.0) == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("cutpoint above the largest jump returns the cutpoint") {
    REQUIRE(conditional_tail_mean(surv, 5.0) == 5.0);
  }
  SECTION("cutpoint below all jumps on fully uncensored data gives the plain mean") {
    const auto full = fit_weighted_km({-1.0, 0.5, 1.0}, {1, 1, 1}, {1.0, 1.0, 1.0});
    REQUIRE(conditional_tail_mean(full, -10.0) ==
            Catch::Approx((-1.0 + 0.5 + 1.0) / 3.0).margin(1e-12));
  }
  SECTION("never below the cutpoint even with tail defect") {
    const auto defect = fit_weighted_km({-1.0, 0.6, 1.0, 2.0}, {1, 0, 1, 0}, {1, 1, 1, 1});
    REQUIRE(conditional_tail_mean(defect, 0.6) >= 0.6);
  }
}

TEST_CASE("residuals") {
  auto ds = test_helpers::make_simple_dataset({.n_clusters = 4, .K = 2, .p = 2, .seed = 8});
  SECTION("zero coefficients return the log times") {
    const auto r = compute_residuals(ds, Eigen::VectorXd::Zero(2));
    REQUIRE(r[0] == ds.clusters[0].members[0].log_time);
  }
  SECTION("exact fit gives zero residuals") {
    Eigen::VectorXd beta(2);
    beta << 0.5, -0.25;
    for (auto& c : ds.clusters)
      for (auto& obs : c.members) obs.log_time = obs.covariates.dot(beta);
    for (double r : compute_residuals(ds, beta)) REQUIRE(r == Catch::Approx(0.0).margin(1e-15));
  }
  SECTION("single observation arithmetic") {
    ClusteredDataset one;
    one.p = 2;
    Cluster c;
    c.stratum = 1;
    Observation obs;
    obs.log_time = 2.0;
    obs.event = true;
    obs.covariates.resize(2);
    obs.covariates << 1.0, 1.0;
    c.members.push_back(obs);
    one.clusters.push_back(c);
    one.strata_counts[1] = {1, 1};
    one.weights = Eigen::VectorXd::Ones(1);
    Eigen::VectorXd beta(2);
    beta << 0.5, 0.5;
    REQUIRE(compute_residuals(one, beta)[0] == Catch::Approx(1.0).margin(1e-15));
  }
}

TEST_CASE("imputed responses") {
  SECTION("fully uncensored data is returned unchanged") {
    auto ds = test_helpers::make_simple_dataset({.n_clusters = 6, .censoring = 0.0, .seed = 9});
    const Eigen::VectorXd b = Eigen::VectorXd::Zero(ds.p);
    const auto surv = fit_weighted_km(ds, b);
    const auto imp = impute_responses(ds, b, surv);
    Eigen::Index q = 0;
    for (const auto& c : ds.clusters)
      for (const auto& obs : c.members) {
        REQUIRE(imp.values[q] == obs.log_time);
        REQUIRE_FALSE(imp.imputed_flags[static_cast<std::size_t>(q)]);
        ++q;
      }
  }
  SECTION("golden three-point example with anchor linear predictor 0.5") {
    // censored residual 0 with tail mean 1, so the imputed response is 1 + 0.5
    ClusteredDataset ds;
    ds.p = 1;
    const double xs[3] = {-1.5, 0.5, 0.5};  // anchor b = 1 gives x*b offsets
    const double es[3] = {-1.0, 0.0, 1.0};
    const bool ev[3] = {true, false, true};
    for (int i = 0; i < 3; ++i) {
      Cluster c;
      c.id = std::to_string(i);
      c.stratum = 1;
      Observation obs;
      obs.covariates.resize(1);
      obs.covariates << xs[i];
      obs.log_time = es[i] + xs[i] * 1.0;
      obs.event = ev[i];
      c.members.push_back(obs);
      ds.clusters.push_back(c);
    }
    ds.strata_counts[1] = {3, 3};
    ds.weights = Eigen::VectorXd::Ones(3);
    Eigen::VectorXd b(1);
    b << 1.0;
    const auto surv = fit_weighted_km(ds, b);
    const auto imp = impute_responses(ds, b, surv);
    REQUIRE(imp.values[1] == Catch::Approx(1.5).margin(1e-12));
    REQUIRE(imp.imputed_flags[1]);
  }
  SECTION("imputed responses never fall below the observed ones") {
    auto rng = substream(31, 0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int rep = 0; rep < 120; ++rep) {
      auto ds = test_helpers::make_simple_dataset({.n_clusters = 12,
                                                   .K = 2,
                                                   .p = 2,
                                                   .censoring = 0.5,
                                                   .seed = 1000 + static_cast<std::uint64_t>(rep)});
      Eigen::VectorXd b(2);
      b << unif(rng) * 2 - 1, unif(rng) * 2 - 1;
      const auto surv = fit_weighted_km(ds, b);
      const auto imp = impute_responses(ds, b, surv);
      Eigen::Index q = 0;
      for (const auto& c : ds.clusters)
        for (const auto& obs : c.members) {
          if (!obs.event) REQUIRE(imp.values[q] >= obs.log_time - 1e-12);
          ++q;
        }
    }
  }
  SECTION("censored beyond the last jump keeps its observed value") {
    const auto surv = fit_weighted_km({0.0, 1.0, 2.0}, {1, 1, 0}, {1, 1, 1});
    REQUIRE(conditional_tail_mean(surv, 2.0) == 2.0);
  }
}
