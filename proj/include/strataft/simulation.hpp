#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "strataft/csv.hpp"
#include "strataft/dataset.hpp"
#include "strataft/errors.hpp"
#include "strataft/normal.hpp"
#include "strataft/resampling.hpp"
#include "strataft/rng.hpp"
#include "strataft/solver.hpp"
#include "strataft/thread_pool.hpp"
#include "strataft/tuning.hpp"

namespace strataft {

// =============================================================================
// Scenario
// =============================================================================

enum class ErrorMarginal { StdNormal, StdLogistic, StdGumbel };

inline ErrorMarginal parse_marginal(const std::string& s) {
  if (s == "normal" || s == "sn") return ErrorMarginal::StdNormal;
  if (s == "logistic" || s == "sl") return ErrorMarginal::StdLogistic;
  if (s == "gumbel" || s == "sg") return ErrorMarginal::StdGumbel;
  throw DataError("unknown error marginal '" + s + "' (expected normal, logistic, or gumbel)");
}

inline const char* to_string(ErrorMarginal m) {
  switch (m) {
    case ErrorMarginal::StdNormal: return "normal";
    case ErrorMarginal::StdLogistic: return "logistic";
    default: return "gumbel";
  }
}

struct SimulationScenario {
  int N_cohort = 3000;
  int K = 3;
  int p = 18;
  Eigen::VectorXd beta_true;
  ErrorMarginal error_marginal = ErrorMarginal::StdNormal;
  double kendall_tau = 0.6;
  double censoring_target = 0.8;
  Eigen::VectorXd inclusion_probs;  // one entry per event count 0..K
  int replications = 200;
  std::uint64_t seed = 1;

  // estimation knobs
  int cv_folds = 5;
  int n_lambda = 50;
  double lambda_min_ratio = 1e-3;
  int variance_replicates = 200;
  double ci_level = 0.95;
  SolverConfig solver;

  void validate() const {
    if (N_cohort < 2 || K < 1 || p < 1) throw DataError("scenario dimensions must be positive");
    if (beta_true.size() != p) throw DataError("beta_true length differs from p");
    if (!(kendall_tau >= 0.0 && kendall_tau < 1.0))
      throw DataError("kendall_tau must lie in [0, 1)");
    if (!(censoring_target > 0.0 && censoring_target < 1.0))
      throw DataError("censoring_target must lie in (0, 1)");
    if (inclusion_probs.size() != K + 1)
      throw DataError("inclusion_probs needs one entry per event count 0..K");
    for (Eigen::Index s = 0; s < inclusion_probs.size(); ++s)
      if (!(inclusion_probs[s] > 0.0 && inclusion_probs[s] <= 1.0))
        throw DataError("inclusion probabilities must lie in (0, 1]");
    if (replications < 1) throw DataError("replications must be positive");
    solver.validate();
  }

  std::vector<int> true_support() const {
    std::vector<int> s;
    for (int j = 0; j < p; ++j)
      if (beta_true[j] != 0.0) s.push_back(j);
    return s;
  }
};

/// Cohort of 3000 clusters of size 3, p = 18 with five nonzero coefficients
/// (0.35, 0.6, -0.8, 0.6, -0.8 at positions 1, 4, 7, 10, 13), event-count strata with
/// inclusion probabilities (0.1, 0.2, 0.3, 0.6).
inline SimulationScenario default_scenario() {
  SimulationScenario sc;
  sc.beta_true = Eigen::VectorXd::Zero(sc.p);
  sc.beta_true[0] = 0.35;
  sc.beta_true[3] = 0.6;
  sc.beta_true[6] = -0.8;
  sc.beta_true[9] = 0.6;
  sc.beta_true[12] = -0.8;
  sc.inclusion_probs.resize(4);
  sc.inclusion_probs << 0.1, 0.2, 0.3, 0.6;
  return sc;
}

// =============================================================================
// Data generation
// =============================================================================

namespace detail {

inline double marginal_quantile(ErrorMarginal m, double u) {
  switch (m) {
    case ErrorMarginal::StdNormal: return norm_quantile(u);
    case ErrorMarginal::StdLogistic: return std::log(u / (1.0 - u));
    default: return -std::log(-std::log(u));  // Gumbel (max form)
  }
}

inline double clamp_unit(double u) {
  const double eps = 1e-15;
  return std::min(std::max(u, eps), 1.0 - eps);
}

}  // namespace detail

/// count x K matrix of dependent errors: Clayton copula with theta = 2*tau/(1-tau)
/// (gamma-frailty construction), marginals transformed through the inverse CDF.
inline Eigen::MatrixXd gen_clayton_errors(int K, double tau, ErrorMarginal marginal, int count,
                                          std::mt19937_64& rng) {
  if (!(tau >= 0.0 && tau < 1.0)) throw DataError("kendall_tau must lie in [0, 1)");
  Eigen::MatrixXd eps(count, K);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  if (tau == 0.0) {
    for (int i = 0; i < count; ++i)
      for (int k = 0; k < K; ++k)
        eps(i, k) = detail::marginal_quantile(marginal, detail::clamp_unit(unif(rng)));
    return eps;
  }
  const double theta = 2.0 * tau / (1.0 - tau);
  std::gamma_distribution<double> frailty(1.0 / theta, 1.0);
  std::exponential_distribution<double> expo(1.0);
  for (int i = 0; i < count; ++i) {
    const double w = frailty(rng);
    for (int k = 0; k < K; ++k) {
      const double u = std::pow(1.0 + expo(rng) / w, -1.0 / theta);
      eps(i, k) = detail::marginal_quantile(marginal, detail::clamp_unit(u));
    }
  }
  return eps;
}

/// Per-cluster K x p covariate matrices. Each covariate's K member values are jointly
/// standard normal with correlation 0.5^|k1-k2|; covariates are independent of each
/// other and across clusters.
inline std::vector<Eigen::MatrixXd> gen_covariates(int N, int K, int p, std::mt19937_64& rng) {
  Eigen::MatrixXd corr(K, K);
  for (int k = 0; k < K; ++k)
    for (int l = 0; l < K; ++l) corr(k, l) = std::pow(0.5, std::abs(k - l));
  const Eigen::MatrixXd chol = Eigen::LLT<Eigen::MatrixXd>(corr).matrixL();
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<Eigen::MatrixXd> out;
  out.reserve(static_cast<std::size_t>(N));
  Eigen::VectorXd z(K);
  for (int i = 0; i < N; ++i) {
    Eigen::MatrixXd x(K, p);
    for (int j = 0; j < p; ++j) {
      for (int k = 0; k < K; ++k) z[k] = gauss(rng);
      x.col(j) = chol * z;
    }
    out.push_back(std::move(x));
  }
  return out;
}

/// Find kappa so that censoring times drawn Uniform(0, kappa) on the natural scale
/// (compared on the log scale) censor `target` of the observations. Bisection on a
/// calibration sample of at least 1e5 observations; the realized rate is within 0.005
/// of the target by construction.
inline double calibrate_censoring(const SimulationScenario& scenario, double target,
                                  std::mt19937_64& rng) {
  if (!(target > 0.0 && target < 1.0)) throw DataError("censoring target must lie in (0, 1)");
  const int n_clusters = (100000 + scenario.K - 1) / scenario.K;
  const Eigen::MatrixXd eps = gen_clayton_errors(scenario.K, scenario.kendall_tau,
                                                 scenario.error_marginal, n_clusters, rng);
  const std::vector<Eigen::MatrixXd> X =
      gen_covariates(n_clusters, scenario.K, scenario.p, rng);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  // censored iff T >= log(kappa * u), i.e. iff T - log(u) >= log(kappa)
  std::vector<double> shifted;
  shifted.reserve(static_cast<std::size_t>(n_clusters) * static_cast<std::size_t>(scenario.K));
  for (int i = 0; i < n_clusters; ++i) {
    const Eigen::VectorXd lin = X[static_cast<std::size_t>(i)] * scenario.beta_true;
    for (int k = 0; k < scenario.K; ++k)
      shifted.push_back(lin[k] + eps(i, k) - std::log(detail::clamp_unit(unif(rng))));
  }
  const double n_obs = static_cast<double>(shifted.size());
  auto rate = [&](double kappa) {
    const double lk = std::log(kappa);
    std::size_t c = 0;
    for (double d : shifted) c += d >= lk ? 1 : 0;
    return static_cast<double>(c) / n_obs;
  };

  double lo = 1.0, hi = 1.0;
  int guard = 0;
  while (rate(hi) > target && guard++ < 400) hi *= 2.0;
  if (guard >= 400) throw NumericError("censoring calibration: no upper bracket found");
  guard = 0;
  while (rate(lo) < target && guard++ < 400) lo /= 2.0;
  if (guard >= 400) throw NumericError("censoring calibration: no lower bracket found");

  double kappa = std::sqrt(lo * hi);
  for (int it = 0; it < 200; ++it) {
    const double r = rate(kappa);
    if (std::fabs(r - target) <= 0.0025) break;
    if (r > target)
      lo = kappa;
    else
      hi = kappa;
    kappa = std::sqrt(lo * hi);
  }
  const double realized = rate(kappa);
  if (std::fabs(realized - target) > 0.005) {
    std::ostringstream msg;
    msg << "censoring calibration failed: target " << target << ", realized " << realized
        << " at kappa " << kappa;
    throw NumericError(msg.str());
  }
  return kappa;
}

/// Full cohort under the scenario at censoring scale kappa: clusters are labeled by
/// 1 + (number of observed events) and returned with unit weights.
inline ClusteredDataset generate_cohort(const SimulationScenario& scenario, double kappa,
                                        std::mt19937_64& rng) {
  const Eigen::MatrixXd eps = gen_clayton_errors(scenario.K, scenario.kendall_tau,
                                                 scenario.error_marginal, scenario.N_cohort, rng);
  std::vector<Eigen::MatrixXd> X =
      gen_covariates(scenario.N_cohort, scenario.K, scenario.p, rng);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  ClusteredDataset ds;
  ds.p = scenario.p;
  ds.clusters.reserve(static_cast<std::size_t>(scenario.N_cohort));
  for (int i = 0; i < scenario.N_cohort; ++i) {
    Cluster c;
    c.id = std::to_string(i + 1);
    c.sampled = true;
    const Eigen::VectorXd lin = X[static_cast<std::size_t>(i)] * scenario.beta_true;
    int events = 0;
    for (int k = 0; k < scenario.K; ++k) {
      Observation obs;
      const double t = lin[k] + eps(i, k);
      const double cst = std::log(kappa * detail::clamp_unit(unif(rng)));
      obs.event = t < cst;
      obs.log_time = obs.event ? t : cst;
      obs.covariates = X[static_cast<std::size_t>(i)].row(k).transpose();
      events += obs.event ? 1 : 0;
      c.members.push_back(std::move(obs));
    }
    c.stratum = 1 + events;
    ds.clusters.push_back(std::move(c));
  }
  for (const auto& c : ds.clusters) {
    auto& cnt = ds.strata_counts[c.stratum];
    cnt.cohort += 1;
    cnt.sampled += 1;
  }
  ds.weights = Eigen::VectorXd::Ones(ds.n_clusters());
  return ds;
}

/// Event-count stratification and without-replacement sampling of round(n_s * p_s)
/// clusters per stratum. Returns the sampled subcohort with realized strata counts and
/// inverse-inclusion weights.
inline ClusteredDataset stratify_and_sample(const ClusteredDataset& cohort,
                                            const Eigen::VectorXd& inclusion_probs,
                                            std::mt19937_64& rng) {
  std::map<int, std::vector<int>> by_stratum;
  std::vector<int> stratum_of(static_cast<std::size_t>(cohort.n_clusters()));
  for (int i = 0; i < cohort.n_clusters(); ++i) {
    const Cluster& c = cohort.clusters[static_cast<std::size_t>(i)];
    int events = 0;
    for (const auto& obs : c.members) events += obs.event ? 1 : 0;
    if (events + 1 > static_cast<int>(inclusion_probs.size()))
      throw DataError("inclusion_probs has no entry for a cluster with " +
                      std::to_string(events) + " events");
    stratum_of[static_cast<std::size_t>(i)] = 1 + events;
    by_stratum[1 + events].push_back(i);
  }

  ClusteredDataset out;
  out.p = cohort.p;
  out.covariate_names = cohort.covariate_names;
  std::vector<char> selected(static_cast<std::size_t>(cohort.n_clusters()), 0);
  for (auto& [stratum, members] : by_stratum) {
    const double ps = inclusion_probs[stratum - 1];
    const std::int64_t n_s = static_cast<std::int64_t>(members.size());
    std::int64_t take = std::llround(static_cast<double>(n_s) * ps);
    if (take > n_s) take = n_s;
    if (take == 0 && n_s > 0) {
      // a redraw cannot change a deterministic rounded count; report the design flaw
      std::ostringstream msg;
      msg << "stratum " << stratum << " has " << n_s
          << " clusters but the rounded sample count is zero";
      throw DataError(msg.str());
    }
    std::shuffle(members.begin(), members.end(), rng);
    for (std::int64_t r = 0; r < take; ++r)
      selected[static_cast<std::size_t>(members[static_cast<std::size_t>(r)])] = 1;
    out.strata_counts[stratum] = StratumCount{n_s, take};
  }

  std::vector<int> strata;
  std::vector<bool> sampled;
  for (int i = 0; i < cohort.n_clusters(); ++i) {
    if (!selected[static_cast<std::size_t>(i)]) continue;
    Cluster c = cohort.clusters[static_cast<std::size_t>(i)];
    c.stratum = stratum_of[static_cast<std::size_t>(i)];
    c.sampled = true;
    out.clusters.push_back(std::move(c));
    strata.push_back(stratum_of[static_cast<std::size_t>(i)]);
    sampled.push_back(true);
  }
  out.weights = compute_weights(out.strata_counts, strata, sampled);
  return out;
}

// =============================================================================
// Methods and metrics
// =============================================================================

struct MethodSpec {
  bool weighted = true;
  CorrelationKind structure = CorrelationKind::Exchangeable;
  enum class Rule { ScadCV, Scad1SE, Oracle };
  Rule rule = Rule::ScadCV;
  bool estimation = false;  // resampling variance + coverage bookkeeping

  std::string label() const {
    std::string s = weighted ? "weighted" : "unweighted";
    s += structure == CorrelationKind::Independence ? "-wi" : (structure == CorrelationKind::Exchangeable ? "-ex" : "-un");
    switch (rule) {
      case Rule::ScadCV: s += "-scad-cv"; break;
      case Rule::Scad1SE: s += "-scad-1se"; break;
      default: s += "-oracle"; break;
    }
    return s;
  }
};

/// "weighted:ex:scad-cv", "unweighted:wi:oracle+var", ...
inline MethodSpec parse_method(const std::string& token) {
  MethodSpec m;
  std::string rest = token;
  if (rest.size() >= 4 && rest.substr(rest.size() - 4) == "+var") {
    m.estimation = true;
    rest = rest.substr(0, rest.size() - 4);
  }
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : rest) {
    if (ch == ':') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  parts.push_back(cur);
  if (parts.size() != 3) throw DataError("method '" + token + "' must be weighting:structure:rule");
  if (parts[0] == "weighted")
    m.weighted = true;
  else if (parts[0] == "unweighted")
    m.weighted = false;
  else
    throw DataError("method weighting must be weighted or unweighted");
  m.structure = parse_correlation(parts[1]);
  if (parts[2] == "scad-cv")
    m.rule = MethodSpec::Rule::ScadCV;
  else if (parts[2] == "scad-1se")
    m.rule = MethodSpec::Rule::Scad1SE;
  else if (parts[2] == "oracle")
    m.rule = MethodSpec::Rule::Oracle;
  else
    throw DataError("method rule must be scad-cv, scad-1se, or oracle");
  return m;
}

struct SelectionMetrics {
  double TP = 0.0;
  double FP = 0.0;
  double C_pct = 0.0;
  double ME_median = 0.0;
  double MSE_mean = 0.0;
  int n_reps = 0;
};

struct EstimationMetrics {
  int N_c = 0;
  double BR_pct = 0.0;
  double SE_a = 0.0;
  double SE_e = 0.0;
  double CP_pct = 0.0;
};

struct SelectionCounts {
  int tp = 0;
  int fp = 0;
  bool exact = false;
};

/// Nonzero pattern of a (thresholded) estimate against the true support.
inline SelectionCounts selection_counts(const Eigen::VectorXd& beta_hat,
                                        const Eigen::VectorXd& beta_true) {
  SelectionCounts c;
  bool exact = true;
  for (Eigen::Index j = 0; j < beta_true.size(); ++j) {
    const bool sel = beta_hat[j] != 0.0;
    const bool truth = beta_true[j] != 0.0;
    c.tp += (sel && truth) ? 1 : 0;
    c.fp += (sel && !truth) ? 1 : 0;
    exact = exact && (sel == truth);
  }
  c.exact = exact;
  return c;
}

/// Sum over sampled observations of the squared linear-predictor error.
inline double model_error(const ClusteredDataset& ds, const Eigen::VectorXd& beta_hat,
                          const Eigen::VectorXd& beta_true) {
  const Eigen::VectorXd d = beta_hat - beta_true;
  double me = 0.0;
  for (const auto& c : ds.clusters) {
    if (!c.sampled) continue;
    for (const auto& obs : c.members) {
      const double v = obs.covariates.dot(d);
      me += v * v;
    }
  }
  return me;
}

struct MethodResult {
  MethodSpec method;
  SelectionMetrics selection;
  std::optional<EstimationMetrics> estimation;
};

struct StudyResult {
  std::vector<MethodResult> methods;
  int replications = 0;
  int failures = 0;
  std::vector<std::string> failure_log;
  std::vector<std::string> raw_rows;  // per replication x method audit lines
  double kappa = 0.0;
  double mean_cohort_censoring = 0.0;
};

inline const char* study_raw_header() {
  return "rep,method,ok,tp,fp,exact,me,mse,beta1,se1,covered";
}

namespace detail {

struct RepMethodRecord {
  bool ok = false;
  int tp = 0, fp = 0;
  bool exact = false;
  double me = 0.0, mse = 0.0;
  double beta1 = 0.0;
  bool beta1_selected = false;
  double se1 = 0.0;
  bool covered = false;
  bool has_est = false;
};

struct RepOutcome {
  bool ok = false;
  std::string error;
  double cohort_censoring = 0.0;
  std::vector<RepMethodRecord> per_method;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace detail

/// Monte Carlo study: per replication, generate a cohort, censor, stratify/sample, fit
/// every requested method (sharing one CV run per weighting/structure pair), and
/// accumulate selection metrics plus optional resampling-based estimation metrics for
/// the first coefficient. Replication substreams are derived from (seed, rep), so
/// results are identical for any worker count.
inline StudyResult run_study(const SimulationScenario& scenario,
                             const std::vector<MethodSpec>& methods, int workers = 1) {
  scenario.validate();
  if (methods.empty()) throw DataError("run_study: no methods requested");

  auto cal_rng = substream(scenario.seed, 0xCA11B001ULL);
  const double kappa = calibrate_censoring(scenario, scenario.censoring_target, cal_rng);

  const std::vector<int> support = scenario.true_support();
  const int n_reps = scenario.replications;
  std::vector<detail::RepOutcome> outcomes(static_cast<std::size_t>(n_reps));

  parallel_for(static_cast<std::size_t>(n_reps), workers, [&](std::size_t rep) {
    detail::RepOutcome& outcome = outcomes[rep];
    outcome.per_method.resize(methods.size());
    try {
      auto rng = substream(scenario.seed, 0x4E900000ULL + rep);
      const ClusteredDataset cohort = generate_cohort(scenario, kappa, rng);
      {
        std::int64_t total = 0, censored = 0;
        for (const auto& c : cohort.clusters)
          for (const auto& obs : c.members) {
            ++total;
            censored += obs.event ? 0 : 1;
          }
        outcome.cohort_censoring = static_cast<double>(censored) / static_cast<double>(total);
      }
      const ClusteredDataset ds_w = stratify_and_sample(cohort, scenario.inclusion_probs, rng);
      const ClusteredDataset ds_u = with_unit_weights(ds_w);
      const std::uint64_t fold_seed = splitmix64(scenario.seed) + rep;

      // one CV per (weighted, structure); one oracle fit per (weighted, structure)
      std::map<std::pair<bool, int>, CvSelection> cv_cache;
      std::map<std::pair<bool, int>, FitResult> oracle_cache;
      auto dataset_for = [&](bool weighted) -> const ClusteredDataset& {
        return weighted ? ds_w : ds_u;
      };
      auto cv_for = [&](bool weighted, CorrelationKind kind) -> const CvSelection& {
        const auto key = std::make_pair(weighted, static_cast<int>(kind));
        auto it = cv_cache.find(key);
        if (it == cv_cache.end()) {
          PenaltySpec scad;
          scad.family = PenaltySpec::Family::Scad;
          CvOptions opts;
          opts.folds = scenario.cv_folds;
          opts.n_lambda = scenario.n_lambda;
          opts.lambda_min_ratio = scenario.lambda_min_ratio;
          opts.seed = fold_seed;
          it = cv_cache
                   .emplace(key, run_cv_selection(dataset_for(weighted), scad, scenario.solver,
                                                  kind, opts))
                   .first;
        }
        return it->second;
      };
      auto oracle_for = [&](bool weighted, CorrelationKind kind) -> const FitResult& {
        const auto key = std::make_pair(weighted, static_cast<int>(kind));
        auto it = oracle_cache.find(key);
        if (it == oracle_cache.end()) {
          const ClusteredDataset reduced = restrict_columns(dataset_for(weighted), support);
          const Eigen::VectorXd init = wols_initial(reduced, /*ridge_fallback=*/true);
          PenaltySpec none;
          FitResult r = fit(reduced, none, scenario.solver, kind, init);
          // expand to the full coefficient space
          Eigen::VectorXd full = Eigen::VectorXd::Zero(scenario.p);
          Eigen::VectorXd full_raw = Eigen::VectorXd::Zero(scenario.p);
          for (std::size_t j = 0; j < support.size(); ++j) {
            full[support[j]] = r.beta[static_cast<Eigen::Index>(j)];
            full_raw[support[j]] = r.beta_raw[static_cast<Eigen::Index>(j)];
          }
          r.beta = std::move(full);
          r.beta_raw = std::move(full_raw);
          r.active_set.clear();
          for (int j : support)
            if (r.beta[j] != 0.0) r.active_set.push_back(j);
          it = oracle_cache.emplace(key, std::move(r)).first;
        }
        return it->second;
      };

      for (std::size_t mi = 0; mi < methods.size(); ++mi) {
        const MethodSpec& method = methods[mi];
        detail::RepMethodRecord& rec = outcome.per_method[mi];
        const ClusteredDataset& ds = dataset_for(method.weighted);

        const FitResult* chosen = nullptr;
        switch (method.rule) {
          case MethodSpec::Rule::ScadCV:
            chosen = &cv_for(method.weighted, method.structure).fit_cv;
            break;
          case MethodSpec::Rule::Scad1SE:
            chosen = &cv_for(method.weighted, method.structure).fit_1se;
            break;
          default:
            chosen = &oracle_for(method.weighted, method.structure);
            break;
        }

        const SelectionCounts counts = selection_counts(chosen->beta, scenario.beta_true);
        rec.tp = counts.tp;
        rec.fp = counts.fp;
        rec.exact = counts.exact;
        rec.me = model_error(ds_w, chosen->beta, scenario.beta_true);
        rec.mse = (chosen->beta - scenario.beta_true).squaredNorm();
        rec.beta1 = chosen->beta[0];
        rec.beta1_selected = chosen->beta[0] != 0.0;
        rec.ok = true;

        if (method.estimation && rec.beta1_selected && chosen->converged) {
          try {
            ResampleConfig rc;
            rc.B = scenario.variance_replicates;
            rc.level = scenario.ci_level;
            rc.seed = splitmix64(scenario.seed ^ 0x5EEDBEEF) + rep * 131 +
                      detail::fnv1a(method.label());
            const VarianceResult vr =
                resample_variance(ds, *chosen, rc, scenario.solver, method.structure);
            for (std::size_t j = 0; j < vr.coef_indices.size(); ++j) {
              if (vr.coef_indices[j] != 0) continue;
              rec.se1 = vr.se[static_cast<Eigen::Index>(j)];
              rec.covered = vr.ci_lo[static_cast<Eigen::Index>(j)] <= scenario.beta_true[0] &&
                            scenario.beta_true[0] <= vr.ci_hi[static_cast<Eigen::Index>(j)];
              rec.has_est = true;
              break;
            }
          } catch (const std::exception&) {
            rec.has_est = false;
          }
        }
      }
      outcome.ok = true;
    } catch (const std::exception& e) {
      outcome.ok = false;
      outcome.error = e.what();
    }
  });

  StudyResult result;
  result.kappa = kappa;
  result.replications = n_reps;
  double censor_sum = 0.0;
  int censor_n = 0;
  for (int rep = 0; rep < n_reps; ++rep) {
    const auto& o = outcomes[static_cast<std::size_t>(rep)];
    if (!o.ok) {
      ++result.failures;
      result.failure_log.push_back("replication " + std::to_string(rep) + ": " + o.error);
      continue;
    }
    censor_sum += o.cohort_censoring;
    ++censor_n;
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      const auto& rec = o.per_method[mi];
      std::ostringstream row;
      row << rep << "," << methods[mi].label() << "," << (rec.ok ? 1 : 0) << "," << rec.tp << ","
          << rec.fp << "," << (rec.exact ? 1 : 0) << "," << fmt_double(rec.me) << ","
          << fmt_double(rec.mse) << "," << fmt_double(rec.beta1) << ","
          << (rec.has_est ? fmt_double(rec.se1) : "") << ","
          << (rec.has_est ? (rec.covered ? "1" : "0") : "");
      result.raw_rows.push_back(row.str());
    }
  }
  if (censor_n > 0) result.mean_cohort_censoring = censor_sum / censor_n;
  if (result.failures * 20 > n_reps) {
    std::ostringstream msg;
    msg << "study aborted: " << result.failures << "/" << n_reps
        << " replications failed (limit 5%)";
    for (std::size_t i = 0; i < result.failure_log.size() && i < 5; ++i)
      msg << "\n  " << result.failure_log[i];
    throw NumericError(msg.str());
  }

  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    MethodResult mr;
    mr.method = methods[mi];
    std::vector<double> mes, mses;
    double tp = 0.0, fp = 0.0, exact = 0.0;
    int n_ok = 0;
    std::vector<double> beta1s, se1s;
    int n_selected = 0, n_est = 0, n_covered = 0;
    double br_sum = 0.0;
    for (int rep = 0; rep < n_reps; ++rep) {
      const auto& o = outcomes[static_cast<std::size_t>(rep)];
      if (!o.ok) continue;
      const auto& rec = o.per_method[mi];
      ++n_ok;
      tp += rec.tp;
      fp += rec.fp;
      exact += rec.exact ? 1.0 : 0.0;
      mes.push_back(rec.me);
      mses.push_back(rec.mse);
      if (rec.beta1_selected) {
        ++n_selected;
        beta1s.push_back(rec.beta1);
        if (scenario.beta_true[0] != 0.0)
          br_sum += (rec.beta1 - scenario.beta_true[0]) / scenario.beta_true[0];
        if (rec.has_est) {
          ++n_est;
          se1s.push_back(rec.se1);
          n_covered += rec.covered ? 1 : 0;
        }
      }
    }
    mr.selection.n_reps = n_ok;
    if (n_ok > 0) {
      mr.selection.TP = tp / n_ok;
      mr.selection.FP = fp / n_ok;
      mr.selection.C_pct = 100.0 * exact / n_ok;
      mr.selection.ME_median = detail::median_of(mes);
      double mse_sum = 0.0;
      for (double v : mses) mse_sum += v;
      mr.selection.MSE_mean = mse_sum / static_cast<double>(mses.size());
    }
    if (methods[mi].estimation) {
      EstimationMetrics em;
      em.N_c = n_selected;
      if (n_selected > 0) {
        em.BR_pct = 100.0 * br_sum / n_selected;
        double mean_b = 0.0;
        for (double b : beta1s) mean_b += b;
        mean_b /= static_cast<double>(beta1s.size());
        double ss = 0.0;
        for (double b : beta1s) ss += (b - mean_b) * (b - mean_b);
        em.SE_e = beta1s.size() > 1 ? std::sqrt(ss / static_cast<double>(beta1s.size() - 1)) : 0.0;
      }
      if (n_est > 0) {
        double se_sum = 0.0;
        for (double s : se1s) se_sum += s;
        em.SE_a = se_sum / static_cast<double>(n_est);
        em.CP_pct = 100.0 * static_cast<double>(n_covered) / static_cast<double>(n_est);
      }
      mr.estimation = em;
    }
    result.methods.push_back(std::move(mr));
  }
  return result;
}

}  // namespace strataft
