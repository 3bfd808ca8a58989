#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstddef>
#include <numeric>
#include <vector>

#include "strataft/dataset.hpp"
#include "strataft/errors.hpp"

namespace strataft {

/// Threshold below which residual survival mass is treated as exhausted.
inline constexpr double kTailEpsilon = 1e-12;

/// Weighted pooled Kaplan-Meier estimate over residuals, stored as a step function.
/// F(t) = 1 - prod over uncensored residuals e < t of [1 - w Delta / sum_{e' >= e} w'],
/// so cdf() uses the strict-inequality product (the left limit at jump points).
/// tail_defect is the survival mass remaining past the last jump; it is positive
/// whenever the largest residual is censored.
struct WeightedSurvival {
  std::vector<double> jump_points;     // sorted distinct uncensored residuals
  std::vector<double> survival_after;  // S(t_j+), non-increasing in [0, 1]
  std::vector<double> jump_mass;       // S(t_j-) - S(t_j+)
  double tail_defect = 1.0;
  double total_mass_check = 1.0;       // sum of jump masses + tail defect

  // suffix[j] = sum over l >= j; one extra terminal zero
  std::vector<double> suffix_mass;
  std::vector<double> suffix_weighted_mass;  // sum of t_l * mass_l

  std::size_t n_jumps() const { return jump_points.size(); }

  /// Index of the first jump point >= t.
  std::size_t lower_index(double t) const {
    return static_cast<std::size_t>(
        std::lower_bound(jump_points.begin(), jump_points.end(), t) - jump_points.begin());
  }

  /// 1 - F(t): survival just before t (mass at t itself still included).
  double survival_before(double t) const {
    const std::size_t j = lower_index(t);
    return j == 0 ? 1.0 : survival_after[j - 1];
  }

  double cdf(double t) const { return 1.0 - survival_before(t); }
};

/// Fit the weighted pooled Kaplan-Meier estimator from per-observation residuals,
/// event indicators, and weights (cluster weights replicated to members). Optional
/// multipliers (e.g. resampling perturbations, also replicated to members) scale the
/// weights. Zero-weight observations are excluded entirely.
///
/// Ties: censored residuals equal to an uncensored value stay in the risk set (the
/// risk-set condition is e' >= e); uncensored ties consume the risk set sequentially,
/// which telescopes to the usual joint tie factor.
inline WeightedSurvival fit_weighted_km(const std::vector<double>& residuals,
                                        const std::vector<char>& events,
                                        const std::vector<double>& weights,
                                        const std::vector<double>& multipliers = {}) {
  const std::size_t m = residuals.size();
  if (events.size() != m || weights.size() != m)
    throw DataError("fit_weighted_km: input lengths differ");
  if (!multipliers.empty() && multipliers.size() != m)
    throw DataError("fit_weighted_km: multiplier length differs");

  std::vector<std::size_t> order;
  order.reserve(m);
  std::vector<double> w(m);
  bool any_event = false;
  for (std::size_t q = 0; q < m; ++q) {
    w[q] = weights[q] * (multipliers.empty() ? 1.0 : multipliers[q]);
    if (w[q] > 0.0) {
      order.push_back(q);
      any_event = any_event || events[q];
    }
  }
  if (!any_event)
    throw DataError("degenerate survival: no positively weighted uncensored observations");

  // ascending residual, ties broken by flattened (cluster, member) position
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (residuals[a] != residuals[b]) return residuals[a] < residuals[b];
    return a < b;
  });

  double at_risk = 0.0;
  for (std::size_t q : order) at_risk += w[q];

  WeightedSurvival fit;
  double survival = 1.0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double value = residuals[order[i]];
    std::size_t j = i;
    double group_weight = 0.0;
    while (j < order.size() && residuals[order[j]] == value) {
      group_weight += w[order[j]];
      ++j;
    }
    const double before = survival;
    double risk = at_risk;
    bool has_event = false;
    for (std::size_t q = i; q < j; ++q) {
      const std::size_t obs = order[q];
      if (!events[obs]) continue;
      has_event = true;
      const double factor = (risk > 0.0) ? 1.0 - w[obs] / risk : 0.0;
      survival *= factor > 0.0 ? factor : 0.0;
      risk -= w[obs];
    }
    if (has_event) {
      fit.jump_points.push_back(value);
      fit.survival_after.push_back(survival);
      fit.jump_mass.push_back(before - survival);
    }
    at_risk -= group_weight;
    i = j;
  }

  fit.tail_defect = fit.survival_after.back();
  const std::size_t nj = fit.n_jumps();
  fit.suffix_mass.assign(nj + 1, 0.0);
  fit.suffix_weighted_mass.assign(nj + 1, 0.0);
  for (std::size_t jj = nj; jj-- > 0;) {
    fit.suffix_mass[jj] = fit.suffix_mass[jj + 1] + fit.jump_mass[jj];
    fit.suffix_weighted_mass[jj] =
        fit.suffix_weighted_mass[jj + 1] + fit.jump_points[jj] * fit.jump_mass[jj];
  }
  fit.total_mass_check = fit.suffix_mass[0] + fit.tail_defect;
  return fit;
}

/// Mean of the residual distribution beyond `cutpoint`:
///   (sum of t * mass over jumps t > cutpoint) / (1 - F(cutpoint)).
/// Total by convention: returns the cutpoint itself when no jump mass lies above it or
/// the denominator is numerically exhausted, and never returns less than the cutpoint
/// (the ratio can dip below it when tail mass is missing past the last jump).
inline double conditional_tail_mean(const WeightedSurvival& surv, double cutpoint,
                                    double eps_tail = kTailEpsilon) {
  const std::size_t above = static_cast<std::size_t>(
      std::upper_bound(surv.jump_points.begin(), surv.jump_points.end(), cutpoint) -
      surv.jump_points.begin());
  if (above >= surv.n_jumps()) return cutpoint;
  const double denom = surv.survival_before(cutpoint);
  if (denom <= eps_tail) return cutpoint;
  const double mean = surv.suffix_weighted_mass[above] / denom;
  return mean < cutpoint ? cutpoint : mean;
}

/// Residuals log_time - x.beta for every member of every sampled cluster, flattened in
/// dataset order (cluster-major).
inline std::vector<double> compute_residuals(const ClusteredDataset& ds,
                                             const Eigen::VectorXd& beta) {
  if (beta.size() != ds.p) throw DataError("compute_residuals: beta length differs from p");
  std::vector<double> res;
  res.reserve(static_cast<std::size_t>(ds.n_sampled_observations()));
  for (const auto& c : ds.clusters) {
    if (!c.sampled) continue;
    for (const auto& obs : c.members) res.push_back(obs.log_time - obs.covariates.dot(beta));
  }
  return res;
}

/// Imputed responses: observed log time for events, conditional tail mean of the
/// residual distribution plus the anchor linear predictor for censored members.
struct ImputedResponses {
  Eigen::VectorXd values;        // flattened over sampled observations
  std::vector<char> imputed_flags;  // true iff censored
};

/// surv must be fitted from residuals at the same anchor coefficients.
inline ImputedResponses impute_responses(const ClusteredDataset& ds,
                                         const Eigen::VectorXd& anchor,
                                         const WeightedSurvival& surv) {
  if (anchor.size() != ds.p) throw DataError("impute_responses: anchor length differs from p");
  ImputedResponses out;
  out.values.resize(ds.n_sampled_observations());
  out.imputed_flags.reserve(static_cast<std::size_t>(ds.n_sampled_observations()));
  Eigen::Index q = 0;
  for (const auto& c : ds.clusters) {
    if (!c.sampled) continue;
    for (const auto& obs : c.members) {
      if (obs.event) {
        out.values[q] = obs.log_time;
        out.imputed_flags.push_back(0);
      } else {
        const double linpred = obs.covariates.dot(anchor);
        const double e = obs.log_time - linpred;
        out.values[q] = conditional_tail_mean(surv, e) + linpred;
        out.imputed_flags.push_back(1);
      }
      ++q;
    }
  }
  return out;
}

/// Convenience overload: fit the survival estimate from a dataset at `beta`, with
/// per-cluster multipliers replicated to members.
inline WeightedSurvival fit_weighted_km(const ClusteredDataset& ds, const Eigen::VectorXd& beta,
                                        const Eigen::VectorXd& cluster_multipliers =
                                            Eigen::VectorXd()) {
  std::vector<double> res = compute_residuals(ds, beta);
  std::vector<char> events;
  std::vector<double> weights, mult;
  events.reserve(res.size());
  weights.reserve(res.size());
  const bool with_mult = cluster_multipliers.size() != 0;
  if (with_mult && cluster_multipliers.size() != ds.n_clusters())
    throw DataError("fit_weighted_km: cluster multiplier length differs");
  for (int i = 0; i < ds.n_clusters(); ++i) {
    const Cluster& c = ds.clusters[i];
    if (!c.sampled) continue;
    for (const auto& obs : c.members) {
      events.push_back(obs.event ? 1 : 0);
      weights.push_back(ds.weights[i]);
      if (with_mult) mult.push_back(cluster_multipliers[i]);
    }
  }
  return fit_weighted_km(res, events, weights, mult);
}

}  // namespace strataft
