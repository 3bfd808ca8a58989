#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <cmath>
#include <string>
#include <vector>

#include "strataft/errors.hpp"

namespace strataft {

enum class CorrelationKind { Independence, Exchangeable, Unstructured };

inline CorrelationKind parse_correlation(const std::string& s) {
  if (s == "independence" || s == "wi") return CorrelationKind::Independence;
  if (s == "exchangeable" || s == "ex") return CorrelationKind::Exchangeable;
  if (s == "unstructured" || s == "un") return CorrelationKind::Unstructured;
  throw DataError("unknown working_correlation '" + s +
                  "' (expected independence, exchangeable, or unstructured)");
}

inline const char* to_string(CorrelationKind k) {
  switch (k) {
    case CorrelationKind::Independence: return "independence";
    case CorrelationKind::Exchangeable: return "exchangeable";
    default: return "unstructured";
  }
}

/// Distance kept from the positive-definiteness boundary when clamping.
inline constexpr double kPdMargin = 1e-4;

/// Working correlation state: exchangeable alpha or a full matrix, plus the
/// dispersion used by the moment estimators. `clamped` records any projection
/// needed to keep the matrix positive definite.
struct CorrelationStructure {
  CorrelationKind kind = CorrelationKind::Independence;
  double alpha = 0.0;
  Eigen::MatrixXd alpha_matrix;  // Unstructured only: symmetric, unit diagonal
  double phi = 1.0;
  int K = 1;
  bool clamped = false;
};

/// Cluster weights rescaled to mean 1 over the clusters passed. All estimators in
/// this module and the solver consume weights in this scale, which is what makes
/// them invariant to rescaling the raw sampling weights.
inline Eigen::VectorXd normalize_cluster_weights(const Eigen::VectorXd& w) {
  const double total = w.sum();
  if (!(total > 0.0)) throw DataError("cluster weights sum to zero");
  return w * (static_cast<double>(w.size()) / total);
}

/// Weighted moment estimator of the dispersion:
///   (sum_i w_i sum_k r_ik^2) / (sum_i w_i K_i - p).
inline double estimate_dispersion(const std::vector<Eigen::VectorXd>& residuals,
                                  const Eigen::VectorXd& weights, int p) {
  if (static_cast<Eigen::Index>(residuals.size()) != weights.size())
    throw DataError("estimate_dispersion: residuals/weights length mismatch");
  const Eigen::VectorXd w = normalize_cluster_weights(weights);
  double num = 0.0, wk = 0.0;
  for (std::size_t i = 0; i < residuals.size(); ++i) {
    const double wi = w[static_cast<Eigen::Index>(i)];
    num += wi * residuals[i].squaredNorm();
    wk += wi * static_cast<double>(residuals[i].size());
  }
  const double denom = wk - static_cast<double>(p);
  if (!(denom > 0.0))
    throw DataError("estimate_dispersion: non-positive denominator (too few observations)");
  return num / denom;
}

struct ExchangeableAlpha {
  double alpha = 0.0;
  bool clamped = false;
};

namespace detail {

inline int common_cluster_size(const std::vector<Eigen::VectorXd>& residuals) {
  if (residuals.empty()) throw DataError("no clusters");
  const int K = static_cast<int>(residuals.front().size());
  for (const auto& r : residuals)
    if (static_cast<int>(r.size()) != K)
      throw DataError("correlation moment estimators require a constant cluster size");
  return K;
}

}  // namespace detail

/// Weighted moment estimator of the exchangeable correlation, clamped into the
/// open positive-definite interval (-1/(K-1), 1) with margin kPdMargin.
inline ExchangeableAlpha estimate_alpha_exchangeable(const std::vector<Eigen::VectorXd>& residuals,
                                                     const Eigen::VectorXd& weights, int p,
                                                     double phi) {
  (void)p;
  const int K = detail::common_cluster_size(residuals);
  if (K < 2) throw DataError("exchangeable correlation is not applicable to clusters of size 1");
  ExchangeableAlpha out;
  if (phi == 0.0) return out;  // degenerate perfect fit
  const Eigen::VectorXd w = normalize_cluster_weights(weights);
  double cross = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < residuals.size(); ++i) {
    const double wi = w[static_cast<Eigen::Index>(i)];
    const Eigen::VectorXd& r = residuals[i];
    for (int k = 1; k < K; ++k)
      for (int kp = 0; kp < k; ++kp) cross += wi * r[k] * r[kp];
    pairs += 0.5 * wi * static_cast<double>(K) * static_cast<double>(K - 1);
  }
  double alpha = (cross / pairs) / phi;
  const double lo = -1.0 / static_cast<double>(K - 1) + kPdMargin;
  const double hi = 1.0 - kPdMargin;
  if (alpha < lo) {
    alpha = lo;
    out.clamped = true;
  } else if (alpha > hi) {
    alpha = hi;
    out.clamped = true;
  }
  out.alpha = alpha;
  return out;
}

/// Weighted general moment estimator of the full correlation matrix:
///   alpha_kk' = phi^{-1} (sum_i w_i r_ik r_ik') / (sum_i w_i - p),  diagonal set to 1.
/// Returned raw (may fail positive definiteness; see make_unstructured).
inline Eigen::MatrixXd estimate_alpha_general(const std::vector<Eigen::VectorXd>& residuals,
                                              const Eigen::VectorXd& weights, int p, double phi) {
  const int K = detail::common_cluster_size(residuals);
  const Eigen::VectorXd w = normalize_cluster_weights(weights);
  const double denom = static_cast<double>(w.size()) - static_cast<double>(p);
  if (!(denom > 0.0))
    throw DataError("estimate_alpha_general: non-positive denominator (too few clusters)");
  Eigen::MatrixXd A = Eigen::MatrixXd::Identity(K, K);
  if (phi == 0.0) return A;
  for (int k = 0; k < K; ++k) {
    for (int kp = k + 1; kp < K; ++kp) {
      double s = 0.0;
      for (std::size_t i = 0; i < residuals.size(); ++i)
        s += w[static_cast<Eigen::Index>(i)] * residuals[i][k] * residuals[i][kp];
      const double a = (s / denom) / phi;
      A(k, kp) = a;
      A(kp, k) = a;
    }
  }
  return A;
}

inline bool is_positive_definite(const Eigen::MatrixXd& A, double tol = 1e-10) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A, Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff() > tol;
}

inline CorrelationStructure make_independence(int K, double phi = 1.0) {
  CorrelationStructure s;
  s.kind = CorrelationKind::Independence;
  s.K = K;
  s.phi = phi;
  return s;
}

inline CorrelationStructure make_exchangeable(double alpha, double phi, int K,
                                              bool clamped = false) {
  CorrelationStructure s;
  s.kind = CorrelationKind::Exchangeable;
  s.alpha = alpha;
  s.phi = phi;
  s.K = K;
  s.clamped = clamped;
  return s;
}

/// Unstructured working correlation. A raw estimate that is not positive definite is
/// shrunk toward the identity, (1-d)A + dI, taking the smallest d on {0.05, 0.10, ...}
/// that restores definiteness, and flagged.
inline CorrelationStructure make_unstructured(Eigen::MatrixXd alpha_matrix, double phi) {
  const int K = static_cast<int>(alpha_matrix.rows());
  if (alpha_matrix.cols() != K) throw DataError("unstructured correlation must be square");
  CorrelationStructure s;
  s.kind = CorrelationKind::Unstructured;
  s.K = K;
  s.phi = phi;
  if (!is_positive_definite(alpha_matrix)) {
    bool fixed = false;
    for (double d = 0.05; d <= 1.0 + 1e-12; d += 0.05) {
      Eigen::MatrixXd cand =
          (1.0 - d) * alpha_matrix + d * Eigen::MatrixXd::Identity(K, K);
      if (is_positive_definite(cand)) {
        alpha_matrix = std::move(cand);
        fixed = true;
        break;
      }
    }
    if (!fixed) throw NumericError("unstructured correlation cannot be shrunk to positive definite");
    s.clamped = true;
  }
  s.alpha_matrix = std::move(alpha_matrix);
  return s;
}

/// Working correlation matrix for a structure (unit diagonal).
inline Eigen::MatrixXd working_correlation_matrix(const CorrelationStructure& s) {
  switch (s.kind) {
    case CorrelationKind::Independence:
      return Eigen::MatrixXd::Identity(s.K, s.K);
    case CorrelationKind::Exchangeable: {
      Eigen::MatrixXd omega = Eigen::MatrixXd::Constant(s.K, s.K, s.alpha);
      omega.diagonal().setOnes();
      return omega;
    }
    default:
      return s.alpha_matrix;
  }
}

/// Inverse working correlation. Exchangeable uses the closed form of
/// ((1-a)I + a 1 1^T)^{-1}; unstructured inverts via LDLT.
inline Eigen::MatrixXd working_correlation_inverse(const CorrelationStructure& s) {
  const int K = s.K;
  if (K == 1) return Eigen::MatrixXd::Identity(1, 1);
  switch (s.kind) {
    case CorrelationKind::Independence:
      return Eigen::MatrixXd::Identity(K, K);
    case CorrelationKind::Exchangeable: {
      const double a = s.alpha;
      if (!(a > -1.0 / static_cast<double>(K - 1) && a < 1.0))
        throw NumericError("exchangeable correlation outside the positive-definite range");
      const double c1 = 1.0 / (1.0 - a);
      const double c2 = -a / ((1.0 - a) * (1.0 + static_cast<double>(K - 1) * a));
      Eigen::MatrixXd inv = Eigen::MatrixXd::Constant(K, K, c2);
      inv.diagonal().array() += c1;
      return inv;
    }
    default: {
      if (!is_positive_definite(s.alpha_matrix))
        throw NumericError("unstructured working correlation is not positive definite");
      return s.alpha_matrix.ldlt().solve(Eigen::MatrixXd::Identity(K, K));
    }
  }
}

}  // namespace strataft
