#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "strataft/dataset.hpp"
#include "strataft/errors.hpp"
#include "strataft/kaplan_meier.hpp"
#include "strataft/rng.hpp"
#include "strataft/solver.hpp"

namespace strataft {

// =============================================================================
// Stratified fold assignment
// =============================================================================

/// Cluster-level fold assignment. Folds are drawn within each stratum and the m-th
/// parts are merged across strata, so every fold keeps roughly the stratum mix of the
/// full sample. Unsampled clusters carry fold -1.
struct CvPlan {
  int M = 5;
  std::vector<int> fold_assignment;  // per cluster of the source dataset
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;
};

/// Split each stratum's sampled clusters into M near-equal random parts (strata with
/// fewer than M clusters get one cluster per part and merge by part index mod M).
inline CvPlan make_folds(const ClusteredDataset& ds, int M, std::uint64_t seed) {
  if (M < 2) throw DataError("cross-validation needs at least 2 folds");
  CvPlan plan;
  plan.M = M;
  plan.seed = seed;
  plan.fold_assignment.assign(static_cast<std::size_t>(ds.n_clusters()), -1);

  std::map<int, std::vector<int>> by_stratum;
  for (int i = 0; i < ds.n_clusters(); ++i)
    if (ds.clusters[static_cast<std::size_t>(i)].sampled)
      by_stratum[ds.clusters[static_cast<std::size_t>(i)].stratum].push_back(i);

  for (auto& [stratum, members] : by_stratum) {
    auto rng = substream(seed, 0x0F01D000ULL + static_cast<std::uint64_t>(stratum));
    std::shuffle(members.begin(), members.end(), rng);
    const int parts = std::min<int>(M, static_cast<int>(members.size()));
    if (parts < M)
      plan.warnings.push_back("stratum " + std::to_string(stratum) + " has only " +
                              std::to_string(members.size()) + " sampled clusters; reduced to " +
                              std::to_string(parts) + " parts");
    for (std::size_t r = 0; r < members.size(); ++r)
      plan.fold_assignment[static_cast<std::size_t>(members[r])] =
          static_cast<int>(r % static_cast<std::size_t>(parts)) % M;
  }
  return plan;
}

// =============================================================================
// Prediction error
// =============================================================================

/// Squared prediction error on a held-out subset:
///   PE = (Yhat(beta_holdout_unpen) - x' beta_train)^2,
/// where the imputation uses the holdout's own weighted Kaplan-Meier estimate at its
/// unpenalized coefficients.
struct HoldoutPrediction {
  Eigen::VectorXd pe;           // per sampled observation
  Eigen::VectorXd obs_weights;  // raw cluster weights replicated to members
  double weighted_sum = 0.0;    // sum of w * PE
  double weight_total = 0.0;    // sum of w over observations
};

inline HoldoutPrediction holdout_prediction_error(const ClusteredDataset& holdout,
                                                  const Eigen::VectorXd& beta_train,
                                                  const Eigen::VectorXd& beta_holdout_unpen) {
  const WeightedSurvival surv = fit_weighted_km(holdout, beta_holdout_unpen);
  const ImputedResponses imputed = impute_responses(holdout, beta_holdout_unpen, surv);
  HoldoutPrediction out;
  out.pe.resize(imputed.values.size());
  out.obs_weights.resize(imputed.values.size());
  Eigen::Index q = 0;
  for (int i = 0; i < holdout.n_clusters(); ++i) {
    const Cluster& c = holdout.clusters[static_cast<std::size_t>(i)];
    if (!c.sampled) continue;
    for (const auto& obs : c.members) {
      const double err = imputed.values[q] - obs.covariates.dot(beta_train);
      out.pe[q] = err * err;
      out.obs_weights[q] = holdout.weights[i];
      ++q;
    }
  }
  out.weighted_sum = out.pe.dot(out.obs_weights);
  out.weight_total = out.obs_weights.sum();
  return out;
}

// =============================================================================
// Lambda grid
// =============================================================================

/// Log-spaced descending grid from lambda_max (smallest lambda that zeroes every
/// non-exempt coefficient on the full data, located by bisection) down to
/// lambda_max * min_ratio.
inline Eigen::VectorXd make_lambda_grid(const ClusteredDataset& ds,
                                        const PenaltySpec& penalty_template,
                                        const SolverConfig& config, CorrelationKind kind,
                                        int n_lambda = 50, double min_ratio = 1e-3,
                                        const Eigen::VectorXd* initial = nullptr) {
  if (n_lambda < 1) throw DataError("lambda grid size must be at least 1");
  if (!(min_ratio > 0.0 && min_ratio <= 1.0)) throw DataError("lambda-min-ratio must be in (0, 1]");
  const SampledView view = SampledView::from_dataset(ds);
  FitEngine engine(view, view.weights, kind);
  Eigen::VectorXd init = initial ? *initial : wols_initial(ds, /*ridge_fallback=*/true);

  // the predicate always starts from the same initializer, so lambda_max is a
  // well-defined function of (data, init) and refitting at any grid value from that
  // initializer reproduces the all-zero solution
  auto zeroes_all = [&](double lambda) {
    FitResult r;
    try {
      r = engine.fit(penalty_template.with_lambda(lambda), config, init);
    } catch (const ConvergenceError&) {
      return false;
    }
    for (int j : r.active_set)
      if (!penalty_template.is_exempt(j)) return false;
    return true;
  };

  // scale guess: sup-norm of the centered weighted cross moments per cluster
  const Eigen::VectorXd w = engine.normalized_weights();
  Eigen::RowVectorXd xbar = Eigen::RowVectorXd::Zero(view.p);
  double ybar = 0.0, wtot = 0.0;
  for (int i = 0; i < view.n; ++i) {
    const int off = view.offset[static_cast<std::size_t>(i)];
    for (int k = 0; k < view.size_of(i); ++k) {
      xbar += w[i] * view.X[static_cast<std::size_t>(i)].row(k);
      ybar += w[i] * view.y[off + k];
      wtot += w[i];
    }
  }
  xbar /= wtot;
  ybar /= wtot;
  Eigen::VectorXd score = Eigen::VectorXd::Zero(view.p);
  for (int i = 0; i < view.n; ++i) {
    const int off = view.offset[static_cast<std::size_t>(i)];
    for (int k = 0; k < view.size_of(i); ++k)
      score += w[i] * (view.y[off + k] - ybar) *
               (view.X[static_cast<std::size_t>(i)].row(k) - xbar).transpose();
  }
  double hi = score.lpNorm<Eigen::Infinity>() / static_cast<double>(view.n);
  if (!(hi > 0.0) || !std::isfinite(hi)) hi = 1.0;

  int guard = 0;
  while (!zeroes_all(hi) && guard++ < 60) hi *= 2.0;
  if (guard >= 60) throw NumericError("lambda grid: could not find a fully zeroing lambda");
  double lo = hi / 2.0;
  guard = 0;
  while (zeroes_all(lo) && guard++ < 60) {
    hi = lo;
    lo /= 2.0;
  }
  if (guard < 60) {
    // bracket [lo, hi]: lo keeps a nonzero coefficient, hi zeroes everything
    for (int it = 0; it < 40 && hi / lo > 1.01; ++it) {
      const double mid = std::sqrt(lo * hi);
      if (zeroes_all(mid))
        hi = mid;
      else
        lo = mid;
    }
  }
  const double lambda_max = hi;

  Eigen::VectorXd grid(n_lambda);
  if (n_lambda == 1) {
    grid[0] = lambda_max;
    return grid;
  }
  const double lmax = std::log(lambda_max);
  const double lmin = std::log(lambda_max * min_ratio);
  for (int g = 0; g < n_lambda; ++g)
    grid[g] = std::exp(lmax + (lmin - lmax) * static_cast<double>(g) /
                                  static_cast<double>(n_lambda - 1));
  return grid;
}

// =============================================================================
// Cross-validation curve
// =============================================================================

struct CvCurve {
  Eigen::VectorXd lambdas;            // descending grid
  Eigen::VectorXd mu;                 // weighted mean prediction error (NaN if dropped)
  std::vector<int> n_valid_folds;
  double se_at_cvmin = 0.0;
  double lambda_cv = 0.0;
  double lambda_1se = 0.0;
  std::vector<std::string> warnings;
};

/// Weighted M-fold prediction error curve over a descending lambda grid, with the
/// minimizing lambda and the one-standard-error choice. Folds whose unpenalized
/// holdout fit or penalized training fit fails are excluded for the affected lambdas.
inline CvCurve cv_curve(const ClusteredDataset& ds, const CvPlan& plan,
                        const Eigen::VectorXd& lambda_grid, const PenaltySpec& penalty_template,
                        const SolverConfig& config, CorrelationKind kind) {
  const int n_lambda = static_cast<int>(lambda_grid.size());
  if (n_lambda == 0) throw DataError("cv_curve: empty lambda grid");
  for (int g = 1; g < n_lambda; ++g)
    if (!(lambda_grid[g] < lambda_grid[g - 1]))
      throw DataError("cv_curve: lambda grid must be strictly descending");
  if (static_cast<int>(plan.fold_assignment.size()) != ds.n_clusters())
    throw DataError("cv_curve: fold assignment does not match the dataset");

  CvCurve curve;
  curve.lambdas = lambda_grid;
  curve.mu = Eigen::VectorXd::Constant(n_lambda, std::numeric_limits<double>::quiet_NaN());
  curve.n_valid_folds.assign(static_cast<std::size_t>(n_lambda), 0);
  curve.warnings = plan.warnings;

  Eigen::VectorXd num = Eigen::VectorXd::Zero(n_lambda);
  Eigen::VectorXd den = Eigen::VectorXd::Zero(n_lambda);

  // pe_by_fold[m] has one column per lambda; used again for the SE at lambda_cv
  std::vector<Eigen::MatrixXd> pe_by_fold(static_cast<std::size_t>(plan.M));
  std::vector<Eigen::VectorXd> w_by_fold(static_cast<std::size_t>(plan.M));
  std::vector<std::vector<char>> valid(static_cast<std::size_t>(plan.M),
                                       std::vector<char>(static_cast<std::size_t>(n_lambda), 0));

  const PenaltySpec unpenalized = [&] {
    PenaltySpec s = penalty_template;
    s.family = PenaltySpec::Family::None;
    s.lambda = 0.0;
    return s;
  }();

  for (int m = 0; m < plan.M; ++m) {
    std::vector<char> keep_hold(static_cast<std::size_t>(ds.n_clusters()), 0);
    std::vector<char> keep_train(static_cast<std::size_t>(ds.n_clusters()), 0);
    int n_hold = 0;
    for (int i = 0; i < ds.n_clusters(); ++i) {
      if (!ds.clusters[static_cast<std::size_t>(i)].sampled) continue;
      if (plan.fold_assignment[static_cast<std::size_t>(i)] == m) {
        keep_hold[static_cast<std::size_t>(i)] = 1;
        ++n_hold;
      } else {
        keep_train[static_cast<std::size_t>(i)] = 1;
      }
    }
    if (n_hold == 0) {
      curve.warnings.push_back("fold " + std::to_string(m) + " is empty");
      continue;
    }

    const ClusteredDataset holdout = subset_clusters(ds, keep_hold);
    const ClusteredDataset training = subset_clusters(ds, keep_train);

    Eigen::VectorXd beta_hold;
    try {
      const Eigen::VectorXd init = wols_initial(holdout, /*ridge_fallback=*/true);
      const FitResult hold_fit = fit(holdout, unpenalized, config, kind, init);
      if (!hold_fit.converged) throw ConvergenceError("holdout fit did not converge", {});
      beta_hold = hold_fit.beta_raw;
    } catch (const std::exception& e) {
      curve.warnings.push_back("fold " + std::to_string(m) +
                               " dropped (holdout fit failed): " + e.what());
      continue;
    }

    SampledView train_view;
    Eigen::VectorXd warm;
    try {
      train_view = SampledView::from_dataset(training);
      warm = wols_initial(training, /*ridge_fallback=*/true);
    } catch (const std::exception& e) {
      curve.warnings.push_back("fold " + std::to_string(m) +
                               " dropped (training setup failed): " + e.what());
      continue;
    }
    FitEngine engine(train_view, train_view.weights, kind);

    Eigen::MatrixXd pes(holdout.n_sampled_observations(), n_lambda);
    for (int g = 0; g < n_lambda; ++g) {
      bool ok = true;
      FitResult r;
      try {
        r = engine.fit(penalty_template.with_lambda(lambda_grid[g]), config, warm);
        ok = r.converged;
        warm = r.beta_raw;
      } catch (const std::exception&) {
        ok = false;
      }
      if (!ok) continue;
      const HoldoutPrediction hp = holdout_prediction_error(holdout, r.beta, beta_hold);
      pes.col(g) = hp.pe;
      if (w_by_fold[static_cast<std::size_t>(m)].size() == 0)
        w_by_fold[static_cast<std::size_t>(m)] = hp.obs_weights;
      valid[static_cast<std::size_t>(m)][static_cast<std::size_t>(g)] = 1;
      num[g] += hp.weighted_sum;
      den[g] += hp.weight_total;
      curve.n_valid_folds[static_cast<std::size_t>(g)] += 1;
    }
    pe_by_fold[static_cast<std::size_t>(m)] = std::move(pes);
  }

  int best = -1;
  for (int g = 0; g < n_lambda; ++g) {
    if (curve.n_valid_folds[static_cast<std::size_t>(g)] == 0) {
      curve.warnings.push_back("lambda " + std::to_string(lambda_grid[g]) +
                               " dropped: no valid folds");
      continue;
    }
    curve.mu[g] = num[g] / den[g];
    if (best < 0 || curve.mu[g] < curve.mu[best]) best = g;
  }
  if (best < 0) throw NumericError("cross-validation failed on every fold");
  // largest lambda attaining the minimum (grid is descending, so the first hit wins)
  for (int g = 0; g < n_lambda; ++g) {
    if (curve.n_valid_folds[static_cast<std::size_t>(g)] > 0 && curve.mu[g] <= curve.mu[best]) {
      best = g;
      break;
    }
  }
  curve.lambda_cv = lambda_grid[best];

  // SE of the prediction errors at lambda_cv; the denominator uses the raw weight
  // total over all sampled clusters and the sampled-cluster count.
  double se_num = 0.0;
  for (int m = 0; m < plan.M; ++m) {
    if (!pe_by_fold[static_cast<std::size_t>(m)].size()) continue;
    if (!valid[static_cast<std::size_t>(m)][static_cast<std::size_t>(best)]) continue;
    const auto& pes = pe_by_fold[static_cast<std::size_t>(m)];
    const auto& wv = w_by_fold[static_cast<std::size_t>(m)];
    for (Eigen::Index q = 0; q < wv.size(); ++q) {
      const double d = pes(q, best) - curve.mu[best];
      se_num += wv[q] * d * d;
    }
  }
  double wsum = 0.0;
  int n_sampled = 0;
  for (int i = 0; i < ds.n_clusters(); ++i)
    if (ds.clusters[static_cast<std::size_t>(i)].sampled) {
      wsum += ds.weights[i];
      ++n_sampled;
    }
  const double se_den = wsum * static_cast<double>(std::max(n_sampled - 1, 1));
  curve.se_at_cvmin = std::sqrt(se_num / se_den);

  const double bar = curve.mu[best] + curve.se_at_cvmin;
  curve.lambda_1se = curve.lambda_cv;
  for (int g = 0; g < n_lambda; ++g) {
    if (curve.n_valid_folds[static_cast<std::size_t>(g)] == 0) continue;
    if (curve.mu[g] <= bar) {
      curve.lambda_1se = lambda_grid[g];  // first (largest) qualifying lambda
      break;
    }
  }
  return curve;
}

// =============================================================================
// One-call selection
// =============================================================================

struct CvOptions {
  int folds = 5;
  int n_lambda = 50;
  double lambda_min_ratio = 1e-3;
  std::uint64_t seed = 0;
};

struct CvSelection {
  Eigen::VectorXd grid;
  CvCurve curve;
  FitResult fit_cv;    // refit on the full data at lambda_cv
  FitResult fit_1se;   // refit on the full data at lambda_1se
};

inline CvSelection run_cv_selection(const ClusteredDataset& ds,
                                    const PenaltySpec& penalty_template,
                                    const SolverConfig& config, CorrelationKind kind,
                                    const CvOptions& options) {
  CvSelection out;
  const Eigen::VectorXd init = wols_initial(ds, /*ridge_fallback=*/true);
  out.grid = make_lambda_grid(ds, penalty_template, config, kind, options.n_lambda,
                              options.lambda_min_ratio, &init);
  const CvPlan plan = make_folds(ds, options.folds, options.seed);
  out.curve = cv_curve(ds, plan, out.grid, penalty_template, config, kind);
  out.fit_cv = fit(ds, penalty_template.with_lambda(out.curve.lambda_cv), config, kind, init);
  if (out.curve.lambda_1se == out.curve.lambda_cv)
    out.fit_1se = out.fit_cv;
  else
    out.fit_1se = fit(ds, penalty_template.with_lambda(out.curve.lambda_1se), config, kind, init);
  return out;
}

}  // namespace strataft
