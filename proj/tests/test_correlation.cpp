#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <vector>

#include "strataft/correlation.hpp"
#include "strataft/rng.hpp"

using namespace strataft;

namespace {

std::vector<Eigen::VectorXd> constant_residuals(int n, int K, double r1, double r2) {
  std::vector<Eigen::VectorXd> res;
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd r(K);
    r[0] = r1;
    for (int k = 1; k < K; ++k) r[k] = r2;
    res.push_back(r);
  }
  return res;
}

}  // namespace

TEST_CASE("dispersion moment estimator") {
  const auto res = constant_residuals(10, 2, 1.0, 1.0);
  const Eigen::VectorXd w = Eigen::VectorXd::Ones(10);
  REQUIRE(estimate_dispersion(res, w, 1) == Catch::Approx(20.0 / 19.0).epsilon(1e-14));

  SECTION("zero residuals give zero dispersion") {
    const auto zeros = constant_residuals(10, 2, 0.0, 0.0);
    REQUIRE(estimate_dispersion(zeros, w, 1) == 0.0);
  }
  SECTION("invariant to rescaling the weights") {
    const Eigen::VectorXd w2 = 2.0 * w;
    REQUIRE(estimate_dispersion(res, w2, 1) ==
            Catch::Approx(estimate_dispersion(res, w, 1)).epsilon(1e-14));
  }
  SECTION("non-positive denominator") {
    const auto small = constant_residuals(1, 2, 1.0, 1.0);
    REQUIRE_THROWS_AS(estimate_dispersion(small, Eigen::VectorXd::Ones(1), 2), DataError);
  }
}

TEST_CASE("exchangeable correlation moment estimator") {
  const Eigen::VectorXd w = Eigen::VectorXd::Ones(10);
  const double phi = 20.0 / 19.0;

  SECTION("all-ones residuals") {
    const auto res = constant_residuals(10, 2, 1.0, 1.0);
    const auto a = estimate_alpha_exchangeable(res, w, 1, phi);
    REQUIRE(a.alpha == Catch::Approx(0.95).epsilon(1e-14));
    REQUIRE_FALSE(a.clamped);
  }
  SECTION("zero cross products") {
    const auto res = constant_residuals(10, 2, 1.0, 0.0);
    const auto a = estimate_alpha_exchangeable(res, w, 1, estimate_dispersion(res, w, 1));
    REQUIRE(a.alpha == 0.0);
  }
  SECTION("sign-flipped residuals stay inside the PD region for K=2") {
    const auto res = constant_residuals(10, 2, 1.0, -1.0);
    const auto a = estimate_alpha_exchangeable(res, w, 1, phi);
    REQUIRE(a.alpha == Catch::Approx(-0.95).epsilon(1e-14));
    REQUIRE_FALSE(a.clamped);
  }
  SECTION("clamping at the PD boundary") {
    // with n large and p small the raw estimate approaches -1
    const int n = 10000;
    const auto res = constant_residuals(n, 2, 1.0, -1.0);
    const Eigen::VectorXd wn = Eigen::VectorXd::Ones(n);
    const double phin = estimate_dispersion(res, wn, 1);
    const auto a = estimate_alpha_exchangeable(res, wn, 1, phin);
    REQUIRE(a.clamped);
    REQUIRE(a.alpha == Catch::Approx(-1.0 + kPdMargin).epsilon(1e-12));
  }
  SECTION("cluster size one is rejected") {
    const auto res = constant_residuals(10, 1, 1.0, 1.0);
    REQUIRE_THROWS_AS(estimate_alpha_exchangeable(res, w, 1, 1.0), DataError);
  }
  SECTION("zero dispersion short-circuits to zero") {
    const auto res = constant_residuals(10, 2, 0.0, 0.0);
    const auto a = estimate_alpha_exchangeable(res, w, 1, 0.0);
    REQUIRE(a.alpha == 0.0);
  }
}

TEST_CASE("general correlation moment estimator") {
  const Eigen::VectorXd w = Eigen::VectorXd::Ones(10);
  const auto res = constant_residuals(10, 2, 1.0, 1.0);
  const double phi = 20.0 / 19.0;
  const Eigen::MatrixXd a = estimate_alpha_general(res, w, 1, phi);
  REQUIRE(a(0, 0) == 1.0);
  REQUIRE(a(1, 1) == 1.0);
  REQUIRE(a(0, 1) == Catch::Approx(19.0 / 18.0).epsilon(1e-14));
  REQUIRE(a(1, 0) == a(0, 1));

  SECTION("off-diagonal above one is shrunk to a PD matrix and flagged") {
    const auto s = make_unstructured(a, phi);
    REQUIRE(s.clamped);
    REQUIRE(s.alpha_matrix(0, 1) == Catch::Approx(0.9 * 19.0 / 18.0).epsilon(1e-12));
    REQUIRE(is_positive_definite(s.alpha_matrix));
  }
  SECTION("independent residuals give near-zero correlations") {
    const int n = 4000;
    auto rng = substream(99, 1);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<Eigen::VectorXd> rr;
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd r(3);
      for (int k = 0; k < 3; ++k) r[k] = gauss(rng);
      rr.push_back(r);
    }
    const Eigen::VectorXd wn = Eigen::VectorXd::Ones(n);
    const double ph = estimate_dispersion(rr, wn, 2);
    const Eigen::MatrixXd est = estimate_alpha_general(rr, wn, 2, ph);
    for (int k = 0; k < 3; ++k)
      for (int l = 0; l < 3; ++l)
        if (k != l) REQUIRE(std::fabs(est(k, l)) < 3.0 / std::sqrt(static_cast<double>(n)));
  }
}

TEST_CASE("working correlation inverse") {
  SECTION("independence and zero-alpha exchangeable are identities") {
    REQUIRE(working_correlation_inverse(make_independence(3)).isIdentity(1e-15));
    REQUIRE(working_correlation_inverse(make_exchangeable(0.0, 1.0, 3)).isIdentity(1e-15));
  }
  SECTION("closed form for K=2, alpha=0.5") {
    const auto inv = working_correlation_inverse(make_exchangeable(0.5, 1.0, 2));
    Eigen::MatrixXd expected(2, 2);
    expected << 1.0, -0.5, -0.5, 1.0;
    expected /= 0.75;
    REQUIRE(inv.isApprox(expected, 1e-14));
  }
  SECTION("any structure collapses to [1] for K=1") {
    auto s = make_exchangeable(0.7, 1.0, 1);
    REQUIRE(working_correlation_inverse(s).isIdentity(1e-15));
  }
  SECTION("product with the correlation matrix is the identity") {
    auto rng = substream(4, 2);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int rep = 0; rep < 50; ++rep) {
      const int K = 2 + static_cast<int>(unif(rng) * 4);
      const double lo = -1.0 / (K - 1);
      const double alpha = lo + (1.0 - lo) * unif(rng) * 0.98 + 0.01 * (1.0 - lo);
      const auto s = make_exchangeable(alpha, 1.0, K);
      const Eigen::MatrixXd omega = working_correlation_matrix(s);
      const Eigen::MatrixXd inv = working_correlation_inverse(s);
      REQUIRE((omega * inv - Eigen::MatrixXd::Identity(K, K)).cwiseAbs().maxCoeff() < 1e-10);
    }
    // random PD unstructured matrices
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int rep = 0; rep < 20; ++rep) {
      const int K = 3;
      Eigen::MatrixXd raw(K, K);
      for (int i = 0; i < K; ++i)
        for (int j = 0; j < K; ++j) raw(i, j) = gauss(rng);
      Eigen::MatrixXd cov = raw * raw.transpose() + 0.5 * Eigen::MatrixXd::Identity(K, K);
      Eigen::VectorXd d = cov.diagonal().cwiseSqrt();
      Eigen::MatrixXd corr = d.cwiseInverse().asDiagonal() * cov * d.cwiseInverse().asDiagonal();
      const auto s = make_unstructured(corr, 1.0);
      REQUIRE_FALSE(s.clamped);
      const Eigen::MatrixXd inv = working_correlation_inverse(s);
      REQUIRE((working_correlation_matrix(s) * inv - Eigen::MatrixXd::Identity(K, K))
                  .cwiseAbs()
                  .maxCoeff() < 1e-10);
    }
  }
  SECTION("exchangeable outside the PD range is rejected") {
    REQUIRE_THROWS_AS(working_correlation_inverse(make_exchangeable(-0.9, 1.0, 3)), NumericError);
  }
}
