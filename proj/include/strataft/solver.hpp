#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "strataft/correlation.hpp"
#include "strataft/dataset.hpp"
#include "strataft/errors.hpp"
#include "strataft/kaplan_meier.hpp"

namespace strataft {

// =============================================================================
// Penalty
// =============================================================================

struct PenaltySpec {
  enum class Family { None, Lasso, Scad };
  Family family = Family::None;
  double lambda = 0.0;
  double a = 3.7;                  // SCAD shape, must exceed 2
  std::vector<bool> exempt_mask;   // empty or length p; true = never penalized

  bool is_exempt(int j) const {
    return !exempt_mask.empty() && exempt_mask[static_cast<std::size_t>(j)];
  }

  void validate(int p) const {
    if (lambda < 0.0) throw DataError("penalty lambda must be nonnegative");
    if (family == Family::Scad && !(a > 2.0)) throw DataError("SCAD shape parameter must exceed 2");
    if (!exempt_mask.empty() && static_cast<int>(exempt_mask.size()) != p)
      throw DataError("exempt mask length differs from the covariate dimension");
  }

  PenaltySpec with_lambda(double l) const {
    PenaltySpec s = *this;
    s.lambda = l;
    return s;
  }
};

inline PenaltySpec::Family parse_penalty_family(const std::string& s) {
  if (s == "none") return PenaltySpec::Family::None;
  if (s == "lasso") return PenaltySpec::Family::Lasso;
  if (s == "scad") return PenaltySpec::Family::Scad;
  throw DataError("unknown penalty '" + s + "' (expected none, lasso, or scad)");
}

/// Derivative of the SCAD penalty:
///   lambda                    for |b| < lambda,
///   (a*lambda - |b|)_+/(a-1)  for |b| >= lambda.
/// Continuous and non-increasing on [0, inf).
inline double scad_derivative(double abs_beta, double lambda, double a) {
  if (abs_beta < lambda) return lambda;
  const double clipped = a * lambda - abs_beta;
  return clipped > 0.0 ? clipped / (a - 1.0) : 0.0;
}

inline double penalty_derivative(double abs_beta, const PenaltySpec& spec) {
  switch (spec.family) {
    case PenaltySpec::Family::None: return 0.0;
    case PenaltySpec::Family::Lasso: return spec.lambda;
    default: return scad_derivative(abs_beta, spec.lambda, spec.a);
  }
}

/// Componentwise p'(|b_j|) * sign(b_j); zero at b_j = 0 and on exempt components.
inline Eigen::VectorXd penalty_gradient(const Eigen::VectorXd& beta, const PenaltySpec& spec) {
  Eigen::VectorXd q = Eigen::VectorXd::Zero(beta.size());
  for (Eigen::Index j = 0; j < beta.size(); ++j) {
    if (beta[j] == 0.0 || spec.is_exempt(static_cast<int>(j))) continue;
    const double d = penalty_derivative(std::fabs(beta[j]), spec);
    q[j] = beta[j] > 0.0 ? d : -d;
  }
  return q;
}

/// Diagonal of the penalty curvature used by the linearized update:
///   p'(|b_j|) / (zeta + |b_j|), zero on exempt components. Zero matrix at lambda = 0.
inline Eigen::VectorXd penalty_curvature(const Eigen::VectorXd& beta, const PenaltySpec& spec,
                                         double zeta) {
  if (!(zeta > 0.0)) throw DataError("zeta must be positive");
  Eigen::VectorXd g = Eigen::VectorXd::Zero(beta.size());
  if (spec.family == PenaltySpec::Family::None || spec.lambda == 0.0) return g;
  for (Eigen::Index j = 0; j < beta.size(); ++j) {
    if (spec.is_exempt(static_cast<int>(j))) continue;
    const double ab = std::fabs(beta[j]);
    g[j] = penalty_derivative(ab, spec) / (zeta + ab);
  }
  return g;
}

// =============================================================================
// Solver configuration and result
// =============================================================================

struct SolverConfig {
  double zeta = 1e-6;        // denominator guard in the penalty curvature
  double gamma = 1e-3;       // sup-norm convergence tolerance, inner and outer
  int max_inner = 50;
  int max_outer = 100;
  double coef_cutoff = 1e-3;  // estimates below this are treated as exact zeros
  enum class PenaltyN { Sampled, Cohort };
  PenaltyN penalty_n = PenaltyN::Sampled;  // cluster count multiplying the penalty

  void validate() const {
    if (!(zeta > 0.0 && gamma > 0.0 && coef_cutoff > 0.0 && max_inner > 0 && max_outer > 0))
      throw DataError("solver configuration values must be positive");
  }
};

struct ThresholdedCoefficients {
  Eigen::VectorXd beta;
  std::vector<int> active_set;
};

/// Zero out entries with |b_j| < cutoff (strict; values exactly at the cutoff are kept).
inline ThresholdedCoefficients threshold_coefficients(const Eigen::VectorXd& beta, double cutoff) {
  if (!(cutoff > 0.0)) throw DataError("threshold cutoff must be positive");
  ThresholdedCoefficients out;
  out.beta = beta;
  for (Eigen::Index j = 0; j < beta.size(); ++j) {
    if (std::fabs(beta[j]) < cutoff)
      out.beta[j] = 0.0;
    else
      out.active_set.push_back(static_cast<int>(j));
  }
  return out;
}

struct FitResult {
  Eigen::VectorXd beta;       // thresholded at coef_cutoff
  Eigen::VectorXd beta_raw;   // final iterate before thresholding
  std::vector<int> active_set;
  CorrelationStructure corr;  // final correlation/dispersion estimate
  std::vector<int> inner_iters;
  int outer_iters = 0;
  bool converged = false;
  std::vector<double> trace;  // outer sup-norm deltas
};

// =============================================================================
// Flattened view of the sampled clusters
// =============================================================================

/// Covariates, responses and weights of the sampled clusters, flattened for the
/// solver. Building the view once lets resampling and cross-validation refit with
/// different cluster weights without copying the data.
struct SampledView {
  int p = 0;
  int n = 0;               // sampled clusters
  bool constant_k = true;
  int K = 0;               // common cluster size when constant_k, otherwise the maximum
  std::vector<Eigen::MatrixXd> X;  // per cluster, K_i x p
  std::vector<int> offset;         // n + 1 prefix offsets into the member arrays
  Eigen::VectorXd y;               // log times
  std::vector<char> event;
  Eigen::VectorXd weights;         // raw sampling weights of the sampled clusters
  std::int64_t cohort_clusters = 0;

  int m() const { return offset.empty() ? 0 : offset.back(); }
  int size_of(int i) const { return offset[static_cast<std::size_t>(i) + 1] - offset[static_cast<std::size_t>(i)]; }

  static SampledView from_dataset(const ClusteredDataset& ds) {
    SampledView v;
    v.p = ds.p;
    v.cohort_clusters = ds.cohort_clusters();
    v.offset.push_back(0);
    std::vector<double> w;
    for (int i = 0; i < ds.n_clusters(); ++i) {
      const Cluster& c = ds.clusters[i];
      if (!c.sampled) continue;
      const int Ki = static_cast<int>(c.members.size());
      Eigen::MatrixXd Xi(Ki, ds.p);
      for (int k = 0; k < Ki; ++k) {
        if (c.members[static_cast<std::size_t>(k)].covariates.size() != ds.p)
          throw DataError("sampled cluster is missing covariates");
        Xi.row(k) = c.members[static_cast<std::size_t>(k)].covariates.transpose();
      }
      v.X.push_back(std::move(Xi));
      v.offset.push_back(v.offset.back() + Ki);
      w.push_back(ds.weights[i]);
    }
    v.n = static_cast<int>(v.X.size());
    if (v.n == 0) throw DataError("dataset has no sampled clusters");
    v.y.resize(v.m());
    v.event.resize(static_cast<std::size_t>(v.m()));
    int q = 0;
    for (const auto& c : ds.clusters) {
      if (!c.sampled) continue;
      for (const auto& obs : c.members) {
        v.y[q] = obs.log_time;
        v.event[static_cast<std::size_t>(q)] = obs.event ? 1 : 0;
        ++q;
      }
    }
    v.weights = Eigen::Map<Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
    v.K = 0;
    for (int i = 0; i < v.n; ++i) v.K = std::max(v.K, v.size_of(i));
    v.constant_k = true;
    for (int i = 0; i < v.n; ++i)
      if (v.size_of(i) != v.K) v.constant_k = false;
    return v;
  }
};

// =============================================================================
// Fit engine
// =============================================================================

/// Two-layer iterative solver. The outer layer re-imputes the censored responses at
/// the current anchor; the inner layer solves the linearized penalized GEE by Newton
/// steps, refreshing the correlation estimate at each iterate. Weights passed here may
/// be raw sampling weights, unit weights, or perturbed weights; they are normalized to
/// mean 1 internally so that penalty scaling is weight-scale free.
class FitEngine {
 public:
  FitEngine(const SampledView& view, const Eigen::VectorXd& cluster_weights, CorrelationKind kind)
      : view_(view), kind_(kind) {
    if (cluster_weights.size() != view.n)
      throw DataError("fit engine: cluster weight length differs from the sampled view");
    w_ = normalize_cluster_weights(cluster_weights);
    p_ = view.p;
    n_ = view.n;
    K_ = view.K;
    use_structure_ = kind != CorrelationKind::Independence && K_ >= 2;
    if (use_structure_ && !view.constant_k)
      throw DataError("exchangeable/unstructured working correlation requires a constant cluster size");

    wobs_.resize(view.m());
    for (int i = 0; i < n_; ++i)
      for (int q = view.offset[static_cast<std::size_t>(i)]; q < view.offset[static_cast<std::size_t>(i) + 1]; ++q)
        wobs_[static_cast<std::size_t>(q)] = w_[i];

    const double wsum = w_.sum();
    double wk_sum = 0.0;
    if (view.constant_k) {
      xbar_ = Eigen::MatrixXd::Zero(K_, p_);
      for (int i = 0; i < n_; ++i) xbar_ += w_[i] * view.X[static_cast<std::size_t>(i)];
      xbar_ /= wsum;
      wk_sum = wsum * static_cast<double>(K_);
    } else {
      Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(p_);
      for (int i = 0; i < n_; ++i) {
        mean += w_[i] * view.X[static_cast<std::size_t>(i)].colwise().sum();
        wk_sum += w_[i] * static_cast<double>(view.size_of(i));
      }
      mean /= wk_sum;
      xbar_ = mean;
    }
    phi_denominator_ = wk_sum - static_cast<double>(p_);

    Xc_.reserve(static_cast<std::size_t>(n_));
    for (int i = 0; i < n_; ++i) {
      Eigen::MatrixXd c = view.X[static_cast<std::size_t>(i)];
      if (view.constant_k)
        c -= xbar_;
      else
        c.rowwise() -= xbar_.row(0);
      Xc_.push_back(std::move(c));
    }

    if (use_structure_) {
      C_.assign(static_cast<std::size_t>(K_ * K_), Eigen::MatrixXd::Zero(p_, p_));
      for (int k = 0; k < K_; ++k)
        for (int l = k; l < K_; ++l) {
          Eigen::MatrixXd& c = C_[static_cast<std::size_t>(k * K_ + l)];
          for (int i = 0; i < n_; ++i)
            c.noalias() += w_[i] * Xc_[static_cast<std::size_t>(i)].row(k).transpose() *
                           Xc_[static_cast<std::size_t>(i)].row(l);
          if (l != k) C_[static_cast<std::size_t>(l * K_ + k)] = c.transpose();
        }
      D_.resize(p_, K_ * K_);
    } else {
      A0_ = Eigen::MatrixXd::Zero(p_, p_);
      for (int i = 0; i < n_; ++i)
        A0_.noalias() += w_[i] * Xc_[static_cast<std::size_t>(i)].transpose() * Xc_[static_cast<std::size_t>(i)];
    }

    resid_.resize(static_cast<std::size_t>(view.m()));
    yhat_.resize(view.m());
    rflat_.resize(view.m());
  }

  const Eigen::VectorXd& normalized_weights() const { return w_; }

  FitResult fit(const PenaltySpec& penalty, const SolverConfig& config,
                const Eigen::VectorXd& initial) {
    config.validate();
    penalty.validate(p_);
    if (initial.size() != p_) throw DataError("initial coefficient length differs from p");

    FitResult result;
    Eigen::VectorXd b = initial;
    Eigen::VectorXd best = b;
    double best_delta = std::numeric_limits<double>::infinity();

    for (int outer = 1; outer <= config.max_outer; ++outer) {
      prepare_anchor(b);
      int inner_count = 0;
      Eigen::VectorXd next = run_inner(b, penalty, config, outer, &inner_count);
      const double delta = (next - b).lpNorm<Eigen::Infinity>();
      b = std::move(next);
      result.inner_iters.push_back(inner_count);
      result.trace.push_back(delta);
      result.outer_iters = outer;
      if (delta < best_delta) {
        best_delta = delta;
        best = b;
      }
      if (delta <= config.gamma) {
        result.converged = true;
        break;
      }
    }
    if (!result.converged) b = best;

    result.beta_raw = b;
    ThresholdedCoefficients thr = threshold_coefficients(b, config.coef_cutoff);
    result.beta = std::move(thr.beta);
    result.active_set = std::move(thr.active_set);
    prepare_anchor(b);
    result.corr = estimate_structure(b);
    return result;
  }

  /// Solve the linearized penalized GEE at a fixed anchor (one outer step).
  Eigen::VectorXd solve_at_anchor(const Eigen::VectorXd& anchor, const PenaltySpec& penalty,
                                  const SolverConfig& config, int* inner_count = nullptr) {
    config.validate();
    penalty.validate(p_);
    if (anchor.size() != p_) throw DataError("anchor coefficient length differs from p");
    prepare_anchor(anchor);
    int count = 0;
    Eigen::VectorXd beta = run_inner(anchor, penalty, config, 0, &count);
    if (inner_count) *inner_count = count;
    return beta;
  }

 private:
  void prepare_anchor(const Eigen::VectorXd& b) {
    for (int i = 0; i < n_; ++i) {
      const int off = view_.offset[static_cast<std::size_t>(i)];
      const int Ki = view_.size_of(i);
      Eigen::Map<Eigen::VectorXd>(resid_.data() + off, Ki) =
          view_.y.segment(off, Ki) - view_.X[static_cast<std::size_t>(i)] * b;
    }
    const WeightedSurvival surv = fit_weighted_km(resid_, view_.event, wobs_);
    for (int q = 0; q < view_.m(); ++q) {
      if (view_.event[static_cast<std::size_t>(q)]) {
        yhat_[q] = view_.y[q];
      } else {
        const double e = resid_[static_cast<std::size_t>(q)];
        yhat_[q] = view_.y[q] + (conditional_tail_mean(surv, e) - e);
      }
    }
    if (use_structure_) {
      D_.setZero();
      for (int i = 0; i < n_; ++i) {
        const int off = view_.offset[static_cast<std::size_t>(i)];
        const Eigen::MatrixXd& xc = Xc_[static_cast<std::size_t>(i)];
        for (int l = 0; l < K_; ++l) {
          const double wy = w_[i] * yhat_[off + l];
          for (int k = 0; k < K_; ++k) D_.col(k * K_ + l).noalias() += wy * xc.row(k).transpose();
        }
      }
    } else {
      v0_ = Eigen::VectorXd::Zero(p_);
      for (int i = 0; i < n_; ++i) {
        const int off = view_.offset[static_cast<std::size_t>(i)];
        v0_.noalias() += w_[i] * Xc_[static_cast<std::size_t>(i)].transpose() *
                         yhat_.segment(off, view_.size_of(i));
      }
    }
  }

  /// Correlation/dispersion moments at the current coefficients, using the imputed
  /// responses of the prepared anchor.
  CorrelationStructure estimate_structure(const Eigen::VectorXd& beta) {
    for (int i = 0; i < n_; ++i) {
      const int off = view_.offset[static_cast<std::size_t>(i)];
      const int Ki = view_.size_of(i);
      rflat_.segment(off, Ki) =
          yhat_.segment(off, Ki) - view_.X[static_cast<std::size_t>(i)] * beta;
    }
    double num = 0.0;
    for (int i = 0; i < n_; ++i) {
      const int off = view_.offset[static_cast<std::size_t>(i)];
      num += w_[i] * rflat_.segment(off, view_.size_of(i)).squaredNorm();
    }
    if (!(phi_denominator_ > 0.0))
      throw DataError("too few observations to estimate the dispersion");
    const double phi = num / phi_denominator_;

    if (kind_ == CorrelationKind::Independence || K_ < 2) {
      CorrelationStructure s = make_independence(std::max(K_, 1), phi);
      s.kind = kind_;  // keep the requested label; the matrix is an identity either way
      return s;
    }
    if (kind_ == CorrelationKind::Exchangeable) {
      if (phi == 0.0) return make_exchangeable(0.0, phi, K_);
      double cross = 0.0, pairs = 0.0;
      for (int i = 0; i < n_; ++i) {
        const int off = view_.offset[static_cast<std::size_t>(i)];
        for (int k = 1; k < K_; ++k)
          for (int kp = 0; kp < k; ++kp) cross += w_[i] * rflat_[off + k] * rflat_[off + kp];
        pairs += 0.5 * w_[i] * static_cast<double>(K_) * static_cast<double>(K_ - 1);
      }
      double alpha = (cross / pairs) / phi;
      const double lo = -1.0 / static_cast<double>(K_ - 1) + kPdMargin;
      const double hi = 1.0 - kPdMargin;
      bool clamped = false;
      if (alpha < lo) { alpha = lo; clamped = true; }
      if (alpha > hi) { alpha = hi; clamped = true; }
      return make_exchangeable(alpha, phi, K_, clamped);
    }
    // unstructured
    Eigen::MatrixXd A = Eigen::MatrixXd::Identity(K_, K_);
    if (phi > 0.0) {
      const double denom = static_cast<double>(n_) - static_cast<double>(p_);
      if (!(denom > 0.0)) throw DataError("too few clusters to estimate the correlation matrix");
      for (int k = 0; k < K_; ++k)
        for (int kp = k + 1; kp < K_; ++kp) {
          double s = 0.0;
          for (int i = 0; i < n_; ++i) {
            const int off = view_.offset[static_cast<std::size_t>(i)];
            s += w_[i] * rflat_[off + k] * rflat_[off + kp];
          }
          A(k, kp) = A(kp, k) = (s / denom) / phi;
        }
    }
    return make_unstructured(std::move(A), phi);
  }

  Eigen::VectorXd run_inner(const Eigen::VectorXd& start, const PenaltySpec& penalty,
                            const SolverConfig& config, int outer, int* inner_count) {
    const double n_pen = penalty_count(config);
    Eigen::VectorXd beta = start;
    Eigen::MatrixXd H;
    Eigen::VectorXd v;
    if (!use_structure_) {
      H = A0_;
      v = v0_;
    }
    std::vector<double> inner_trace;
    for (int s = 1; s <= config.max_inner; ++s) {
      if (use_structure_) {
        const CorrelationStructure cs = estimate_structure(beta);
        const Eigen::MatrixXd omega_inv = working_correlation_inverse(cs);
        H = Eigen::MatrixXd::Zero(p_, p_);
        v = Eigen::VectorXd::Zero(p_);
        for (int k = 0; k < K_; ++k)
          for (int l = 0; l < K_; ++l) {
            const double c = omega_inv(k, l);
            if (c == 0.0) continue;
            H.noalias() += c * C_[static_cast<std::size_t>(k * K_ + l)];
            v.noalias() += c * D_.col(k * K_ + l);
          }
        H = 0.5 * (H + H.transpose()).eval();
      }
      const Eigen::VectorXd g = penalty_curvature(beta, penalty, config.zeta);
      Eigen::MatrixXd A = H;
      A.diagonal() += n_pen * g;
      Eigen::VectorXd rhs = v - H * beta - n_pen * g.cwiseProduct(beta);

      Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
      const double maxdiag = A.diagonal().cwiseAbs().maxCoeff();
      if (ldlt.info() != Eigen::Success || !(maxdiag > 0.0) ||
          ldlt.vectorD().minCoeff() < 1e-12 * maxdiag) {
        std::ostringstream msg;
        msg << "rank-deficient penalized system (p=" << p_ << ", n=" << n_
            << "); the centered weighted design does not have full column rank";
        throw NumericError(msg.str());
      }
      const Eigen::VectorXd step = ldlt.solve(rhs);
      beta += step;
      const double delta = step.lpNorm<Eigen::Infinity>();
      inner_trace.push_back(delta);
      if (delta <= config.gamma) {
        if (inner_count) *inner_count = s;
        return beta;
      }
    }
    std::ostringstream msg;
    msg << "inner Newton loop did not converge within " << config.max_inner << " iterations";
    if (outer > 0) msg << " (outer iteration " << outer << ")";
    throw ConvergenceError(msg.str(), inner_trace);
  }

  double penalty_count(const SolverConfig& config) const {
    if (config.penalty_n == SolverConfig::PenaltyN::Cohort && view_.cohort_clusters > 0)
      return static_cast<double>(view_.cohort_clusters);
    return static_cast<double>(n_);
  }

  const SampledView& view_;
  CorrelationKind kind_;
  bool use_structure_ = false;
  int p_ = 0, n_ = 0, K_ = 0;
  double phi_denominator_ = 0.0;
  Eigen::VectorXd w_;
  std::vector<double> wobs_;
  Eigen::MatrixXd xbar_;
  std::vector<Eigen::MatrixXd> Xc_;
  std::vector<Eigen::MatrixXd> C_;  // constant-K cross-position Gram blocks
  Eigen::MatrixXd A0_;              // independence Gram
  Eigen::MatrixXd D_;               // per-anchor cross-position moment columns
  Eigen::VectorXd v0_;
  std::vector<double> resid_;
  Eigen::VectorXd yhat_;
  Eigen::VectorXd rflat_;
};

// =============================================================================
// Public operations
// =============================================================================

/// Weighted centered information matrix: sum_i w_i (X_i - Xbar)' Winv (X_i - Xbar),
/// with Xbar the weighted position-wise covariate mean.
inline Eigen::MatrixXd weighted_information(const ClusteredDataset& ds,
                                            const Eigen::MatrixXd& omega_inv) {
  const SampledView view = SampledView::from_dataset(ds);
  const Eigen::VectorXd w = normalize_cluster_weights(view.weights);
  const int K = static_cast<int>(omega_inv.rows());
  Eigen::MatrixXd xbar = Eigen::MatrixXd::Zero(K, ds.p);
  for (int i = 0; i < view.n; ++i) {
    if (view.size_of(i) != K) throw DataError("cluster size differs from the correlation dimension");
    xbar += w[i] * view.X[static_cast<std::size_t>(i)];
  }
  xbar /= w.sum();
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(ds.p, ds.p);
  for (int i = 0; i < view.n; ++i) {
    const Eigen::MatrixXd xc = view.X[static_cast<std::size_t>(i)] - xbar;
    H.noalias() += w[i] * xc.transpose() * omega_inv * xc;
  }
  return H;
}

/// Weighted estimating function at `beta` given imputed responses:
///   sum_i w_i (X_i - Xbar)' Winv (Yhat_i - X_i beta).
inline Eigen::VectorXd estimating_function(const ClusteredDataset& ds,
                                           const ImputedResponses& imputed,
                                           const Eigen::VectorXd& beta,
                                           const Eigen::MatrixXd& omega_inv) {
  const SampledView view = SampledView::from_dataset(ds);
  if (imputed.values.size() != view.m())
    throw DataError("imputed responses length differs from the sampled observations");
  const Eigen::VectorXd w = normalize_cluster_weights(view.weights);
  const int K = static_cast<int>(omega_inv.rows());
  Eigen::MatrixXd xbar = Eigen::MatrixXd::Zero(K, ds.p);
  for (int i = 0; i < view.n; ++i) {
    if (view.size_of(i) != K) throw DataError("cluster size differs from the correlation dimension");
    xbar += w[i] * view.X[static_cast<std::size_t>(i)];
  }
  xbar /= w.sum();
  Eigen::VectorXd u = Eigen::VectorXd::Zero(ds.p);
  for (int i = 0; i < view.n; ++i) {
    const int off = view.offset[static_cast<std::size_t>(i)];
    const Eigen::MatrixXd xc = view.X[static_cast<std::size_t>(i)] - xbar;
    const Eigen::VectorXd r =
        imputed.values.segment(off, K) - view.X[static_cast<std::size_t>(i)] * beta;
    u.noalias() += w[i] * xc.transpose() * omega_inv * r;
  }
  return u;
}

/// Weighted ordinary least squares on the uncensored observations, the standard
/// initializer. W = diag(w_i * event). Throws on a rank-deficient design unless the
/// ridge fallback is enabled (diagonal jitter 1e-8, reported through ridge_used).
inline Eigen::VectorXd wols_initial(const ClusteredDataset& ds, bool ridge_fallback = false,
                                    bool* ridge_used = nullptr) {
  const SampledView view = SampledView::from_dataset(ds);
  const Eigen::VectorXd w = normalize_cluster_weights(view.weights);
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(ds.p, ds.p);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(ds.p);
  long n_uncensored = 0;
  for (int i = 0; i < view.n; ++i) {
    const int off = view.offset[static_cast<std::size_t>(i)];
    for (int k = 0; k < view.size_of(i); ++k) {
      if (!view.event[static_cast<std::size_t>(off + k)]) continue;
      ++n_uncensored;
      const auto x = view.X[static_cast<std::size_t>(i)].row(k);
      A.noalias() += w[i] * x.transpose() * x;
      rhs.noalias() += w[i] * view.y[off + k] * x.transpose();
    }
  }
  if (n_uncensored == 0)
    throw NumericError("weighted OLS initializer: no uncensored observations");
  if (ridge_used) *ridge_used = false;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
  const double maxdiag = A.diagonal().cwiseAbs().maxCoeff();
  if (ldlt.info() != Eigen::Success || !(maxdiag > 0.0) ||
      ldlt.vectorD().minCoeff() < 1e-12 * maxdiag) {
    if (!ridge_fallback)
      throw NumericError(
          "weighted OLS initializer: design is rank deficient on the uncensored observations; "
          "use a penalized fit (lambda > 0) or the ridge fallback");
    A.diagonal().array() += 1e-8;
    ldlt.compute(A);
    if (ridge_used) *ridge_used = true;
  }
  return ldlt.solve(rhs);
}

/// Solve the linearized penalized GEE at a fixed imputation anchor (a single outer step).
inline Eigen::VectorXd solve_penalized_gee(const ClusteredDataset& ds,
                                           const Eigen::VectorXd& anchor,
                                           const PenaltySpec& penalty, const SolverConfig& config,
                                           CorrelationKind kind) {
  const SampledView view = SampledView::from_dataset(ds);
  FitEngine engine(view, view.weights, kind);
  return engine.solve_at_anchor(anchor, penalty, config);
}

/// Penalized weighted estimating-equation fit (full two-layer iteration).
inline FitResult fit(const ClusteredDataset& ds, const PenaltySpec& penalty,
                     const SolverConfig& config, CorrelationKind kind,
                     const Eigen::VectorXd& initial_b) {
  const SampledView view = SampledView::from_dataset(ds);
  FitEngine engine(view, view.weights, kind);
  return engine.fit(penalty, config, initial_b);
}

/// Same fit on a prebuilt view with explicit cluster weights.
inline FitResult fit_view(const SampledView& view, const Eigen::VectorXd& cluster_weights,
                          const PenaltySpec& penalty, const SolverConfig& config,
                          CorrelationKind kind, const Eigen::VectorXd& initial_b) {
  FitEngine engine(view, cluster_weights, kind);
  return engine.fit(penalty, config, initial_b);
}

}  // namespace strataft
