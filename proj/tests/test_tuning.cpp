#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <set>

#include "strataft/tuning.hpp"
#include "test_helpers.hpp"

using namespace strataft;

namespace {

PenaltySpec scad_template() {
  PenaltySpec s;
  s.family = PenaltySpec::Family::Scad;
  return s;
}

}  // namespace

TEST_CASE("stratified fold assignment") {
  SECTION("strata of 10 and 20 clusters split 2+4 per fold") {
    auto ds = test_helpers::make_simple_dataset({.n_clusters = 30, .K = 1, .p = 2, .seed = 31});
    for (int i = 0; i < 30; ++i) ds.clusters[i].stratum = i < 10 ? 1 : 2;
    const auto plan = make_folds(ds, 5, 7);
    std::map<std::pair<int, int>, int> size;  // (stratum, fold) -> count
    for (int i = 0; i < 30; ++i) size[{ds.clusters[i].stratum, plan.fold_assignment[i]}]++;
    for (int m = 0; m < 5; ++m) {
      REQUIRE(size[{1, m}] == 2);
      REQUIRE(size[{2, m}] == 4);
    }
  }
  SECTION("same seed reproduces the assignment") {
    const auto ds = test_helpers::make_simple_dataset({.n_clusters = 22, .strata = 3, .seed = 32});
    REQUIRE(make_folds(ds, 4, 99).fold_assignment == make_folds(ds, 4, 99).fold_assignment);
  }
  SECTION("per-stratum fold sizes differ by at most one") {
    const auto ds = test_helpers::make_simple_dataset({.n_clusters = 37, .strata = 3, .seed = 33});
    const auto plan = make_folds(ds, 5, 3);
    std::map<int, std::map<int, int>> sizes;
    for (int i = 0; i < ds.n_clusters(); ++i)
      sizes[ds.clusters[i].stratum][plan.fold_assignment[i]]++;
    for (auto& [stratum, folds] : sizes) {
      int lo = 1 << 30, hi = 0;
      for (int m = 0; m < 5; ++m) {
        const int c = folds.count(m) ? folds[m] : 0;
        lo = std::min(lo, c);
        hi = std::max(hi, c);
      }
      // reduced strata leave later folds empty; among populated parts sizes differ by <= 1
      int lo_pos = 1 << 30;
      for (auto& [m, c] : folds) lo_pos = std::min(lo_pos, c);
      REQUIRE(hi - lo_pos <= 1);
    }
  }
  SECTION("tiny strata are reduced with a warning") {
    auto ds = test_helpers::make_simple_dataset({.n_clusters = 13, .seed = 34});
    for (int i = 0; i < 13; ++i) ds.clusters[i].stratum = i < 3 ? 1 : 2;
    const auto plan = make_folds(ds, 5, 5);
    REQUIRE_FALSE(plan.warnings.empty());
    std::set<int> folds_used;
    for (int i = 0; i < 3; ++i) folds_used.insert(plan.fold_assignment[i]);
    REQUIRE(folds_used.size() == 3);
  }
  SECTION("fewer than two folds is invalid") {
    const auto ds = test_helpers::make_simple_dataset({.n_clusters = 10, .seed = 35});
    REQUIRE_THROWS_AS(make_folds(ds, 1, 1), DataError);
  }
}

TEST_CASE("holdout prediction error") {
  SECTION("matching coefficients on uncensored data give squared residuals") {
    const auto ds = test_helpers::make_simple_dataset(
        {.n_clusters = 15, .K = 1, .p = 2, .censoring = 0.0, .seed = 36});
    Eigen::VectorXd beta(2);
    beta << 0.4, -0.2;
    const auto hp = holdout_prediction_error(ds, beta, beta);
    Eigen::Index q = 0;
    for (const auto& c : ds.clusters)
      for (const auto& obs : c.members) {
        const double r = obs.log_time - obs.covariates.dot(beta);
        REQUIRE(hp.pe[q] == Catch::Approx(r * r).margin(1e-12));
        ++q;
      }
  }
  SECTION("perfect linear data gives zero error") {
    auto ds = test_helpers::make_simple_dataset(
        {.n_clusters = 15, .K = 1, .p = 2, .censoring = 0.0, .seed = 37});
    Eigen::VectorXd beta(2);
    beta << 1.0, -0.5;
    for (auto& c : ds.clusters)
      for (auto& obs : c.members) obs.log_time = obs.covariates.dot(beta);
    const auto hp = holdout_prediction_error(ds, beta, beta);
    REQUIRE(hp.pe.lpNorm<Eigen::Infinity>() < 1e-20);
  }
  SECTION("censored observation with imputed response 1.5 against prediction 1.0") {
    // three clusters, residuals at the holdout coefficients are {-1, 0, 1} with the
    // middle censored, so its imputed response is 1 + x*b = 1.5
    ClusteredDataset ds;
    ds.p = 1;
    const double xs[3] = {-1.5, 0.5, 0.5};
    const double es[3] = {-1.0, 0.0, 1.0};
    const bool ev[3] = {true, false, true};
    for (int i = 0; i < 3; ++i) {
      Cluster c;
      c.id = std::to_string(i);
      c.stratum = 1;
      Observation obs;
      obs.covariates.resize(1);
      obs.covariates << xs[i];
      obs.log_time = es[i] + xs[i];
      obs.event = ev[i];
      c.members.push_back(obs);
      ds.clusters.push_back(c);
    }
    ds.strata_counts[1] = {3, 3};
    ds.weights = Eigen::VectorXd::Ones(3);
    Eigen::VectorXd b_hold(1), b_train(1);
    b_hold << 1.0;
    b_train << 2.0;  // prediction for the censored member is x * 2 = 1.0
    const auto hp = holdout_prediction_error(ds, b_train, b_hold);
    REQUIRE(hp.pe[1] == Catch::Approx(0.25).margin(1e-12));
  }
}

TEST_CASE("lambda grid construction") {
  const auto ds = test_helpers::make_simple_dataset(
      {.n_clusters = 40, .K = 2, .p = 4, .censoring = 0.3, .seed = 38});
  SolverConfig config;
  const auto grid =
      make_lambda_grid(ds, scad_template(), config, CorrelationKind::Independence, 12, 1e-3);
  REQUIRE(grid.size() == 12);
  for (int g = 1; g < 12; ++g) REQUIRE(grid[g] < grid[g - 1]);
  REQUIRE(grid[11] == Catch::Approx(grid[0] * 1e-3).epsilon(1e-9));

  SECTION("the top of the grid zeroes every coefficient") {
    const auto r = fit(ds, scad_template().with_lambda(grid[0]), config,
                       CorrelationKind::Independence, wols_initial(ds));
    REQUIRE(r.beta.isZero(0.0));
  }
}

TEST_CASE("cross-validation curve") {
  SolverConfig config;

  SECTION("flat curve picks the largest lambda for both rules") {
    // every coefficient exempt: all lambdas produce the identical fit
    auto ds = test_helpers::make_simple_dataset(
        {.n_clusters = 24, .K = 1, .p = 2, .censoring = 0.0, .seed = 39});
    PenaltySpec spec = scad_template();
    spec.exempt_mask = {true, true};
    Eigen::VectorXd grid(4);
    grid << 0.8, 0.4, 0.2, 0.1;
    const auto plan = make_folds(ds, 3, 11);
    const auto curve = cv_curve(ds, plan, grid, spec, config, CorrelationKind::Independence);
    REQUIRE(curve.lambda_cv == 0.8);
    REQUIRE(curve.lambda_1se == 0.8);
  }

  SECTION("one-standard-error choice is never below the minimizer") {
    const auto ds = test_helpers::make_simple_dataset({.n_clusters = 30,
                                                       .K = 2,
                                                       .p = 3,
                                                       .censoring = 0.3,
                                                       .heterogeneous_weights = true,
                                                       .seed = 40});
    const auto grid =
        make_lambda_grid(ds, scad_template(), config, CorrelationKind::Independence, 10, 1e-3);
    const auto plan = make_folds(ds, 3, 5);
    const auto curve = cv_curve(ds, plan, grid, scad_template(), config,
                                CorrelationKind::Independence);
    REQUIRE(curve.lambda_1se >= curve.lambda_cv);
    REQUIRE(curve.n_valid_folds.size() == 10);
  }

  SECTION("selections are invariant to rescaling the weights") {
    const auto ds = test_helpers::make_simple_dataset({.n_clusters = 30,
                                                       .K = 2,
                                                       .p = 3,
                                                       .censoring = 0.3,
                                                       .heterogeneous_weights = true,
                                                       .seed = 41});
    const auto scaled = test_helpers::scale_weights(ds, 5.0);
    const auto grid =
        make_lambda_grid(ds, scad_template(), config, CorrelationKind::Independence, 8, 1e-2);
    const auto plan = make_folds(ds, 3, 13);
    const auto a = cv_curve(ds, plan, grid, scad_template(), config, CorrelationKind::Independence);
    const auto b =
        cv_curve(scaled, plan, grid, scad_template(), config, CorrelationKind::Independence);
    REQUIRE(a.lambda_cv == b.lambda_cv);
    REQUIRE(a.lambda_1se == b.lambda_1se);
    REQUIRE(a.se_at_cvmin == Catch::Approx(b.se_at_cvmin).epsilon(1e-10));
  }

  SECTION("a single-lambda grid returns that lambda under both rules") {
    const auto ds = test_helpers::make_simple_dataset(
        {.n_clusters = 24, .K = 1, .p = 2, .censoring = 0.2, .seed = 42});
    Eigen::VectorXd grid(1);
    grid << 0.05;
    const auto plan = make_folds(ds, 3, 3);
    const auto curve =
        cv_curve(ds, plan, grid, scad_template(), config, CorrelationKind::Independence);
    REQUIRE(curve.lambda_cv == 0.05);
    REQUIRE(curve.lambda_1se == 0.05);
  }
}
