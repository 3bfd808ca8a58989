#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "strataft/csv.hpp"
#include "strataft/dataset.hpp"
#include "test_helpers.hpp"

using namespace strataft;

TEST_CASE("compute_weights basic ratios") {
  std::map<int, StratumCount> counts{{1, {200, 20}}};
  const auto w = compute_weights(counts, {1}, {true});
  REQUIRE(w[0] == Catch::Approx(10.0).epsilon(0));

  std::map<int, StratumCount> full{{1, {5, 5}}, {2, {3, 3}}};
  const auto w2 = compute_weights(full, {1, 2, 1}, {true, true, true});
  REQUIRE(w2.isApproxToConstant(1.0));
}

TEST_CASE("compute_weights reproduces the four-strata design weights") {
  std::map<int, StratumCount> counts{
      {1, {2000, 200}}, {2, {510, 100}}, {3, {330, 100}}, {4, {160, 100}}};
  const auto w = compute_weights(counts, {1, 2, 3, 4}, {true, true, true, true});
  REQUIRE(w[0] == Catch::Approx(10.0).margin(1e-12));
  REQUIRE(w[1] == Catch::Approx(5.1).margin(1e-12));
  REQUIRE(w[2] == Catch::Approx(3.3).margin(1e-12));
  REQUIRE(w[3] == Catch::Approx(1.6).margin(1e-12));
}

TEST_CASE("compute_weights rejects inconsistent designs") {
  std::map<int, StratumCount> zero_sampled{{1, {10, 0}}};
  REQUIRE_THROWS_AS(compute_weights(zero_sampled, {1}, {true}), DataError);
  // unsampled clusters in such a stratum are fine
  REQUIRE_NOTHROW(compute_weights(zero_sampled, {1}, {false}));

  std::map<int, StratumCount> oversampled{{1, {10, 11}}};
  REQUIRE_THROWS_AS(compute_weights(oversampled, {1}, {true}), DataError);

  std::map<int, StratumCount> counts{{1, {10, 5}}};
  REQUIRE_THROWS_AS(compute_weights(counts, {2}, {true}), DataError);
}

TEST_CASE("Horvitz-Thompson totals reproduce stratum sizes") {
  auto ds = test_helpers::make_simple_dataset({.n_clusters = 60,
                                               .heterogeneous_weights = true,
                                               .strata = 3,
                                               .seed = 5});
  std::map<int, double> totals;
  for (int i = 0; i < ds.n_clusters(); ++i)
    if (ds.clusters[i].sampled) totals[ds.clusters[i].stratum] += ds.weights[i];
  for (const auto& [s, cnt] : ds.strata_counts) {
    if (cnt.sampled == 0) continue;
    REQUIRE(totals[s] == Catch::Approx(static_cast<double>(cnt.cohort)).epsilon(1e-9));
  }
}

TEST_CASE("validate_dataset passes a well-formed dataset") {
  const auto ds = test_helpers::make_simple_dataset({.n_clusters = 8, .seed = 2});
  const auto report = validate_dataset(ds);
  CAPTURE(report.failures);
  REQUIRE(report.pass);
}

TEST_CASE("validate_dataset reports dimension and weight failures") {
  auto ds = test_helpers::make_simple_dataset({.n_clusters = 6, .seed = 3});

  SECTION("covariate length mismatch") {
    ds.clusters[2].members[0].covariates.resize(ds.p + 1);
    const auto report = validate_dataset(ds);
    REQUIRE_FALSE(report.pass);
    bool mentioned = false;
    for (const auto& f : report.failures) mentioned |= f.find("covariate length") != std::string::npos;
    REQUIRE(mentioned);
  }
  SECTION("sampled cluster with zero weight") {
    ds.weights[1] = 0.0;
    const auto report = validate_dataset(ds);
    REQUIRE_FALSE(report.pass);
    bool mentioned = false;
    for (const auto& f : report.failures) mentioned |= f.find("zero weight") != std::string::npos;
    REQUIRE(mentioned);
  }
  SECTION("non-finite log time") {
    ds.clusters[0].members[0].log_time = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_FALSE(validate_dataset(ds).pass);
  }
}

TEST_CASE("restrict_columns keeps the requested covariates") {
  const auto ds = test_helpers::make_simple_dataset({.n_clusters = 5, .p = 4, .seed = 4});
  const auto reduced = restrict_columns(ds, {0, 2});
  REQUIRE(reduced.p == 2);
  REQUIRE(reduced.clusters[0].members[0].covariates[0] ==
          ds.clusters[0].members[0].covariates[0]);
  REQUIRE(reduced.clusters[0].members[0].covariates[1] ==
          ds.clusters[0].members[0].covariates[2]);
  REQUIRE_THROWS_AS(restrict_columns(ds, {7}), DataError);
}

TEST_CASE("CSV round trip reproduces the dataset") {
  const auto ds = test_helpers::make_simple_dataset(
      {.n_clusters = 12, .K = 3, .p = 3, .heterogeneous_weights = true, .seed = 6});
  const auto dir = std::filesystem::temp_directory_path() / "strataft_test_csv";
  std::filesystem::create_directories(dir);
  const std::string data_path = (dir / "data.csv").string();
  const std::string counts_path = (dir / "counts.csv").string();
  write_dataset_csv(ds, data_path);
  write_strata_counts_csv(ds.strata_counts, counts_path);

  const auto counts = load_strata_counts_csv(counts_path);
  const auto back = load_dataset_csv(data_path, counts);
  REQUIRE(back.p == ds.p);
  REQUIRE(back.n_clusters() == ds.n_clusters());
  REQUIRE(back.weights.isApprox(ds.weights, 0.0));
  for (int i = 0; i < ds.n_clusters(); ++i) {
    REQUIRE(back.clusters[i].stratum == ds.clusters[i].stratum);
    REQUIRE(back.clusters[i].members.size() == ds.clusters[i].members.size());
    for (std::size_t k = 0; k < ds.clusters[i].members.size(); ++k) {
      const auto& a = ds.clusters[i].members[k];
      const auto& b = back.clusters[i].members[k];
      REQUIRE(b.event == a.event);
      // covariates survive the decimal round trip bit for bit
      REQUIRE(b.covariates.isApprox(a.covariates, 0.0));
      // times pass through exp/log, which costs at most a couple of ulps
      REQUIRE(b.log_time == Catch::Approx(a.log_time).margin(1e-14 * std::max(1.0, std::fabs(a.log_time))));
    }
  }
}

TEST_CASE("CSV loader reports malformed rows with row numbers") {
  const auto dir = std::filesystem::temp_directory_path() / "strataft_test_csv";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "bad.csv").string();

  SECTION("bad status") {
    std::ofstream(path) << "cluster_id,member_id,time,status,stratum,x1\n"
                           "1,1,2.0,1,1,0.5\n"
                           "1,2,3.0,yes,1,0.1\n";
    try {
      load_dataset_csv(path);
      FAIL("expected DataError");
    } catch (const DataError& e) {
      REQUIRE(std::string(e.what()).find("row 3") != std::string::npos);
    }
  }
  SECTION("nonpositive time") {
    std::ofstream(path) << "cluster_id,member_id,time,status,stratum,x1\n"
                           "1,1,-2.0,1,1,0.5\n";
    REQUIRE_THROWS_AS(load_dataset_csv(path), DataError);
  }
  SECTION("field count") {
    std::ofstream(path) << "cluster_id,member_id,time,status,stratum,x1\n"
                           "1,1,2.0,1,1\n";
    REQUIRE_THROWS_AS(load_dataset_csv(path), DataError);
  }
  SECTION("empty file") {
    std::ofstream(path) << "";
    REQUIRE_THROWS_AS(load_dataset_csv(path), DataError);
  }
}
