#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "strataft/errors.hpp"

namespace strataft {

/// One member of a cluster: observed log failure/censoring time, event indicator,
/// covariate row. Covariates may be empty for members of unsampled clusters.
struct Observation {
  double log_time = 0.0;
  bool event = false;
  Eigen::VectorXd covariates;
};

struct Cluster {
  std::string id;
  int stratum = 1;
  bool sampled = true;
  std::vector<Observation> members;
};

/// Per-stratum cohort size and sampled-subcohort size.
struct StratumCount {
  std::int64_t cohort = 0;
  std::int64_t sampled = 0;
};

/// Clustered survival data under stratified sampling. Weights are the
/// inverse-inclusion-probability weights: cohort/sampled for sampled clusters in their
/// stratum, 0 for unsampled clusters. Immutable by convention once built; nothing here
/// mutates shared state, so a dataset can back concurrent fits.
struct ClusteredDataset {
  std::vector<Cluster> clusters;
  int p = 0;
  std::map<int, StratumCount> strata_counts;
  Eigen::VectorXd weights;
  std::vector<std::string> covariate_names;

  int n_clusters() const { return static_cast<int>(clusters.size()); }

  int n_sampled() const {
    int n = 0;
    for (const auto& c : clusters) n += c.sampled ? 1 : 0;
    return n;
  }

  /// Observations belonging to sampled clusters.
  std::int64_t n_sampled_observations() const {
    std::int64_t m = 0;
    for (const auto& c : clusters)
      if (c.sampled) m += static_cast<std::int64_t>(c.members.size());
    return m;
  }

  std::int64_t cohort_clusters() const {
    std::int64_t n = 0;
    for (const auto& [s, cnt] : strata_counts) n += cnt.cohort;
    return n;
  }

  /// Default covariate names x1..xp when none were recorded.
  std::vector<std::string> names_or_default() const {
    if (static_cast<int>(covariate_names.size()) == p) return covariate_names;
    std::vector<std::string> names;
    names.reserve(static_cast<std::size_t>(p));
    for (int j = 0; j < p; ++j) names.push_back("x" + std::to_string(j + 1));
    return names;
  }
};

/// Inverse-inclusion-probability weights from realized per-stratum counts.
/// Sampled cluster in stratum s gets cohort_s/sampled_s; unsampled clusters get 0.
inline Eigen::VectorXd compute_weights(const std::map<int, StratumCount>& strata_counts,
                                       const std::vector<int>& cluster_strata,
                                       const std::vector<bool>& sampled_flags) {
  if (cluster_strata.size() != sampled_flags.size())
    throw DataError("compute_weights: strata and sampled flags differ in length");
  for (const auto& [s, cnt] : strata_counts) {
    if (cnt.sampled > cnt.cohort) {
      std::ostringstream msg;
      msg << "compute_weights: invalid design in stratum " << s << ": sampled count "
          << cnt.sampled << " exceeds cohort count " << cnt.cohort;
      throw DataError(msg.str());
    }
  }
  Eigen::VectorXd w(static_cast<Eigen::Index>(cluster_strata.size()));
  for (std::size_t i = 0; i < cluster_strata.size(); ++i) {
    if (!sampled_flags[i]) {
      w[static_cast<Eigen::Index>(i)] = 0.0;
      continue;
    }
    const auto it = strata_counts.find(cluster_strata[i]);
    if (it == strata_counts.end()) {
      std::ostringstream msg;
      msg << "compute_weights: cluster " << i << " references stratum " << cluster_strata[i]
          << " with no recorded counts";
      throw DataError(msg.str());
    }
    if (it->second.sampled <= 0) {
      std::ostringstream msg;
      msg << "compute_weights: stratum " << cluster_strata[i]
          << " contains a sampled cluster but records zero sampled clusters";
      throw DataError(msg.str());
    }
    w[static_cast<Eigen::Index>(i)] =
        static_cast<double>(it->second.cohort) / static_cast<double>(it->second.sampled);
  }
  return w;
}

struct ValidationReport {
  bool pass = true;
  std::vector<std::string> failures;

  void fail(std::string msg) {
    pass = false;
    failures.push_back(std::move(msg));
  }
};

/// Structural validation: dimensions, finiteness, stratum bookkeeping, weight consistency.
/// Report-returning; never throws.
inline ValidationReport validate_dataset(const ClusteredDataset& ds) {
  ValidationReport report;
  if (ds.clusters.empty()) report.fail("dataset has no clusters");
  if (ds.p <= 0) report.fail("covariate dimension p must be positive");
  if (ds.weights.size() != ds.n_clusters())
    report.fail("weights length does not match the number of clusters");

  std::map<int, std::int64_t> label_total, label_sampled;
  for (int i = 0; i < ds.n_clusters(); ++i) {
    const Cluster& c = ds.clusters[i];
    const std::string tag = "cluster " + (c.id.empty() ? std::to_string(i) : c.id);
    if (c.members.empty()) report.fail(tag + " has no members");
    label_total[c.stratum] += 1;
    if (c.sampled) label_sampled[c.stratum] += 1;
    for (std::size_t k = 0; k < c.members.size(); ++k) {
      const Observation& obs = c.members[k];
      if (!std::isfinite(obs.log_time))
        report.fail(tag + " member " + std::to_string(k + 1) + " has non-finite log time");
      if (c.sampled) {
        if (obs.covariates.size() != ds.p)
          report.fail(tag + " member " + std::to_string(k + 1) + " has covariate length " +
                      std::to_string(obs.covariates.size()) + ", expected " +
                      std::to_string(ds.p));
        else if (!obs.covariates.allFinite())
          report.fail(tag + " member " + std::to_string(k + 1) + " has non-finite covariates");
      } else if (obs.covariates.size() != 0 && obs.covariates.size() != ds.p) {
        report.fail(tag + " member " + std::to_string(k + 1) +
                    " (unsampled) has covariate length " + std::to_string(obs.covariates.size()));
      }
    }
    if (ds.weights.size() == ds.n_clusters()) {
      const double w = ds.weights[i];
      if (!std::isfinite(w) || w < 0.0) report.fail(tag + " has an invalid weight");
      if (c.sampled && w == 0.0) report.fail(tag + " is sampled but has zero weight");
      if (!c.sampled && w != 0.0) report.fail(tag + " is unsampled but has nonzero weight");
      const auto it = ds.strata_counts.find(c.stratum);
      if (it == ds.strata_counts.end()) {
        report.fail(tag + " references stratum " + std::to_string(c.stratum) +
                    " missing from strata counts");
      } else if (c.sampled && it->second.sampled > 0) {
        const double expected = static_cast<double>(it->second.cohort) /
                                static_cast<double>(it->second.sampled);
        if (std::fabs(w - expected) > 1e-9 * std::max(1.0, expected))
          report.fail(tag + " weight " + std::to_string(w) + " differs from cohort/sampled ratio");
      }
    }
  }
  for (const auto& [s, cnt] : ds.strata_counts) {
    if (cnt.sampled > cnt.cohort)
      report.fail("stratum " + std::to_string(s) + ": sampled count exceeds cohort count");
    if (cnt.cohort < 0 || cnt.sampled < 0)
      report.fail("stratum " + std::to_string(s) + ": negative counts");
    const std::int64_t seen_sampled = label_sampled.count(s) ? label_sampled[s] : 0;
    const std::int64_t seen_total = label_total.count(s) ? label_total[s] : 0;
    if (seen_sampled != cnt.sampled)
      report.fail("stratum " + std::to_string(s) + ": " + std::to_string(seen_sampled) +
                  " sampled clusters present, counts record " + std::to_string(cnt.sampled));
    if (seen_total > cnt.cohort)
      report.fail("stratum " + std::to_string(s) + ": more clusters present than the cohort count");
  }
  return report;
}

/// Copy with all sampled-cluster weights forced to 1 (the unweighted comparator).
/// Strata counts are rewritten so the result still validates.
inline ClusteredDataset with_unit_weights(const ClusteredDataset& ds) {
  ClusteredDataset out = ds;
  for (int i = 0; i < out.n_clusters(); ++i)
    out.weights[i] = out.clusters[i].sampled ? 1.0 : 0.0;
  for (auto& [s, cnt] : out.strata_counts) cnt.cohort = cnt.sampled;
  return out;
}

/// Subset of clusters selected by `keep` (same length as clusters). Weights and
/// strata counts are carried over unchanged; the subset is a working view for
/// cross-validation, not a new sampling design.
inline ClusteredDataset subset_clusters(const ClusteredDataset& ds, const std::vector<char>& keep) {
  if (keep.size() != ds.clusters.size())
    throw DataError("subset_clusters: mask length mismatch");
  ClusteredDataset out;
  out.p = ds.p;
  out.strata_counts = ds.strata_counts;
  out.covariate_names = ds.covariate_names;
  std::vector<double> w;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (!keep[i]) continue;
    out.clusters.push_back(ds.clusters[i]);
    w.push_back(ds.weights[static_cast<Eigen::Index>(i)]);
  }
  out.weights = Eigen::Map<Eigen::VectorXd>(w.data(), static_cast<Eigen::Index>(w.size()));
  return out;
}

/// Copy keeping only the covariate columns in `columns` (for post-selection refits).
inline ClusteredDataset restrict_columns(const ClusteredDataset& ds,
                                         const std::vector<int>& columns) {
  ClusteredDataset out = ds;
  out.p = static_cast<int>(columns.size());
  out.covariate_names.clear();
  const auto names = ds.names_or_default();
  for (int j : columns) {
    if (j < 0 || j >= ds.p) throw DataError("restrict_columns: column index out of range");
    out.covariate_names.push_back(names[static_cast<std::size_t>(j)]);
  }
  for (auto& c : out.clusters) {
    for (auto& obs : c.members) {
      if (obs.covariates.size() == 0) continue;
      Eigen::VectorXd x(out.p);
      for (int j = 0; j < out.p; ++j) x[j] = obs.covariates[columns[static_cast<std::size_t>(j)]];
      obs.covariates = std::move(x);
    }
  }
  return out;
}

}  // namespace strataft
