#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "strataft/dataset.hpp"
#include "strataft/errors.hpp"
#include "strataft/normal.hpp"
#include "strataft/rng.hpp"
#include "strataft/solver.hpp"
#include "strataft/thread_pool.hpp"

namespace strataft {

/// Cluster-level perturbation laws with mean 1 (and variance 1, except the degenerate
/// law, which exists for diagnostics: it must reproduce the point refit exactly).
enum class MultiplierLaw { Exponential1, TwoPoint, DegenerateOne };

inline MultiplierLaw parse_multiplier_law(const std::string& s) {
  if (s == "exp" || s == "exponential") return MultiplierLaw::Exponential1;
  if (s == "twopoint") return MultiplierLaw::TwoPoint;
  if (s == "degenerate" || s == "one") return MultiplierLaw::DegenerateOne;
  throw DataError("unknown multiplier law '" + s + "' (expected exp or twopoint)");
}

struct ResampleConfig {
  int B = 200;
  MultiplierLaw law = MultiplierLaw::Exponential1;
  std::uint64_t seed = 0;
  bool refit_active_only = true;
  double level = 0.95;
  int workers = 1;

  void validate() const {
    if (B < 2) throw DataError("resampling needs at least 2 replicates");
    if (!(level > 0.0 && level < 1.0)) throw DataError("confidence level must lie in (0, 1)");
  }
};

/// Wald interval estimate +/- z * se.
inline std::pair<double, double> wald_ci(double estimate, double se, double level) {
  if (!(level > 0.0 && level < 1.0)) throw DataError("confidence level must lie in (0, 1)");
  if (se < 0.0) throw DataError("standard error must be nonnegative");
  const double z = norm_quantile(0.5 * (1.0 + level));
  return {estimate - z * se, estimate + z * se};
}

struct VarianceResult {
  std::vector<int> coef_indices;      // refit coefficient set (columns of the source data)
  std::vector<std::string> coef_names;
  Eigen::VectorXd estimates;          // point refit over the coefficient set
  Eigen::VectorXd se;
  Eigen::MatrixXd covariance;
  Eigen::VectorXd ci_lo, ci_hi;
  int B_requested = 0;
  int B_effective = 0;
  bool reliable = true;
  std::string note;
};

/// Post-selection resampling variance. Refits the unpenalized model on the selected
/// covariates, then solves the perturbed estimating equation B times with cluster
/// weights Z_i * w_i (the perturbation enters every weighted quantity: covariate means,
/// correlation moments, the survival estimate, and the estimating function). The
/// covariance is the empirical covariance of the converged replicate estimates.
inline VarianceResult resample_variance(const ClusteredDataset& ds, const FitResult& point_fit,
                                        const ResampleConfig& rconfig,
                                        const SolverConfig& solver_config, CorrelationKind kind) {
  rconfig.validate();
  if (!point_fit.converged)
    throw DataError("resample_variance requires a converged point fit");

  VarianceResult out;
  out.B_requested = rconfig.B;
  std::vector<int> columns = rconfig.refit_active_only
                                 ? point_fit.active_set
                                 : [&] {
                                     std::vector<int> all(static_cast<std::size_t>(ds.p));
                                     for (int j = 0; j < ds.p; ++j) all[static_cast<std::size_t>(j)] = j;
                                     return all;
                                   }();
  if (columns.empty()) {
    out.note = "active set is empty; nothing to refit";
    return out;
  }
  out.coef_indices = columns;
  const auto names = ds.names_or_default();
  for (int j : columns) out.coef_names.push_back(names[static_cast<std::size_t>(j)]);

  const ClusteredDataset reduced = restrict_columns(ds, columns);
  const SampledView view = SampledView::from_dataset(reduced);
  PenaltySpec unpenalized;  // family None

  Eigen::VectorXd init(columns.size());
  for (std::size_t j = 0; j < columns.size(); ++j)
    init[static_cast<Eigen::Index>(j)] = point_fit.beta[columns[j]];

  const FitResult refit = fit_view(view, view.weights, unpenalized, solver_config, kind, init);
  if (!refit.converged)
    throw ConvergenceError("post-selection refit did not converge", refit.trace);
  out.estimates = refit.beta_raw;

  std::vector<std::optional<Eigen::VectorXd>> replicates(static_cast<std::size_t>(rconfig.B));
  parallel_for(static_cast<std::size_t>(rconfig.B), rconfig.workers, [&](std::size_t b) {
    auto rng = substream(rconfig.seed, b + 1);
    Eigen::VectorXd z(view.n);
    switch (rconfig.law) {
      case MultiplierLaw::Exponential1: {
        std::exponential_distribution<double> law(1.0);
        for (int i = 0; i < view.n; ++i) z[i] = law(rng);
        break;
      }
      case MultiplierLaw::TwoPoint: {
        std::bernoulli_distribution law(0.5);
        for (int i = 0; i < view.n; ++i) z[i] = law(rng) ? 2.0 : 0.0;
        break;
      }
      default:
        z.setOnes();
    }
    try {
      const Eigen::VectorXd wb = view.weights.cwiseProduct(z);
      const FitResult r = fit_view(view, wb, unpenalized, solver_config, kind, out.estimates);
      if (r.converged) replicates[b] = r.beta_raw;
    } catch (const std::exception&) {
      // dropped replicate; accounted for in B_effective
    }
  });

  std::vector<Eigen::VectorXd> kept;
  kept.reserve(static_cast<std::size_t>(rconfig.B));
  for (auto& r : replicates)
    if (r) kept.push_back(std::move(*r));
  out.B_effective = static_cast<int>(kept.size());
  if (out.B_effective < 2)
    throw NumericError("resampling variance failed: fewer than 2 replicates converged");
  if (rconfig.B - out.B_effective > rconfig.B / 5) {
    out.reliable = false;
    out.note = "more than 20% of replicates failed to converge; variance may be unreliable";
  }

  // two-pass covariance on data shifted by the first replicate, so identical
  // replicates yield exact zeros
  const Eigen::Index d = static_cast<Eigen::Index>(columns.size());
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
  for (const auto& r : kept) mean += r - kept.front();
  mean /= static_cast<double>(kept.size());
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  for (const auto& r : kept) {
    const Eigen::VectorXd c = (r - kept.front()) - mean;
    cov.noalias() += c * c.transpose();
  }
  cov /= static_cast<double>(kept.size() - 1);
  out.covariance = std::move(cov);
  out.se = out.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
  out.ci_lo.resize(d);
  out.ci_hi.resize(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const auto [lo, hi] = wald_ci(out.estimates[j], out.se[j], rconfig.level);
    out.ci_lo[j] = lo;
    out.ci_hi[j] = hi;
  }
  return out;
}

}  // namespace strataft
