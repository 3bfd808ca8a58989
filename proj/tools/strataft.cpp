// Command-line front end: validate, fit, select, variance, simulate, km.
// Exit codes: 0 success, 1 input/config error, 2 non-convergence, 3 numeric failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "strataft/strataft.hpp"

namespace {

using json = nlohmann::json;
using namespace strataft;

constexpr int kExitOk = 0;
constexpr int kExitInput = 1;
constexpr int kExitNonConvergence = 2;
constexpr int kExitNumeric = 3;

struct DataOptions {
  std::string data_path;
  std::string strata_counts_path;
};

struct FitOptions {
  std::string penalty = "none";
  double lambda = 0.0;
  double scad_a = 3.7;
  std::string corstr = "independence";
  std::string exempt;  // comma-separated covariate names
  std::string init = "wols";
  SolverConfig solver;
};

void add_data_options(CLI::App* cmd, DataOptions& opts) {
  cmd->add_option("--data", opts.data_path, "input CSV (cluster_id,member_id,time,status,stratum,x...)")
      ->required();
  cmd->add_option("--strata-counts", opts.strata_counts_path,
                  "per-stratum cohort/sampled counts CSV for weight construction");
}

void add_fit_options(CLI::App* cmd, FitOptions& opts) {
  cmd->add_option("--penalty", opts.penalty, "none, lasso, or scad")
      ->check(CLI::IsMember({"none", "lasso", "scad"}));
  cmd->add_option("--lambda", opts.lambda, "penalty tuning parameter");
  cmd->add_option("--scad-a", opts.scad_a, "SCAD shape parameter (default 3.7)");
  cmd->add_option("--corstr", opts.corstr, "working correlation: independence, exchangeable, unstructured")
      ->check(CLI::IsMember({"independence", "exchangeable", "unstructured"}));
  cmd->add_option("--exempt", opts.exempt, "comma-separated covariate names never penalized");
  cmd->add_option("--gamma", opts.solver.gamma, "convergence tolerance (sup norm)");
  cmd->add_option("--zeta", opts.solver.zeta, "penalty curvature denominator guard");
  cmd->add_option("--max-inner", opts.solver.max_inner, "inner iteration cap");
  cmd->add_option("--max-outer", opts.solver.max_outer, "outer iteration cap");
  cmd->add_option("--cutoff", opts.solver.coef_cutoff, "coefficient zero cutoff");
  cmd->add_option("--init", opts.init, "initial coefficients: wols, zeros, or a file of values");
}

ClusteredDataset load_data(const DataOptions& opts) {
  std::optional<std::map<int, StratumCount>> counts;
  if (!opts.strata_counts_path.empty())
    counts = load_strata_counts_csv(opts.strata_counts_path);
  return load_dataset_csv(opts.data_path, counts);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

PenaltySpec build_penalty(const FitOptions& opts, const ClusteredDataset& ds) {
  PenaltySpec spec;
  spec.family = parse_penalty_family(opts.penalty);
  spec.lambda = opts.lambda;
  spec.a = opts.scad_a;
  if (!opts.exempt.empty()) {
    spec.exempt_mask.assign(static_cast<std::size_t>(ds.p), false);
    const auto names = ds.names_or_default();
    for (const auto& name : split_commas(opts.exempt)) {
      bool found = false;
      for (int j = 0; j < ds.p; ++j)
        if (names[static_cast<std::size_t>(j)] == name) {
          spec.exempt_mask[static_cast<std::size_t>(j)] = true;
          found = true;
        }
      if (!found) throw DataError("exempt covariate '" + name + "' is not a column of the data");
    }
  }
  return spec;
}

Eigen::VectorXd initial_coefficients(const std::string& init, const ClusteredDataset& ds) {
  if (init == "wols") return wols_initial(ds, /*ridge_fallback=*/true);
  if (init == "zeros") return Eigen::VectorXd::Zero(ds.p);
  std::ifstream in(init);
  if (!in) throw DataError("cannot open initial coefficient file: " + init);
  std::vector<double> values;
  double v = 0.0;
  while (in >> v) values.push_back(v);
  if (static_cast<int>(values.size()) != ds.p)
    throw DataError("initial coefficient file holds " + std::to_string(values.size()) +
                    " values, expected " + std::to_string(ds.p));
  return Eigen::Map<Eigen::VectorXd>(values.data(), ds.p);
}

void write_coefficients(const std::string& path, const ClusteredDataset& ds,
                        const FitResult& fit_result) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  const auto names = ds.names_or_default();
  out << "name,estimate,selected\n";
  for (int j = 0; j < ds.p; ++j) {
    const bool selected = fit_result.beta[j] != 0.0;
    out << names[static_cast<std::size_t>(j)] << "," << fmt_double(fit_result.beta[j]) << ","
        << (selected ? 1 : 0) << "\n";
  }
}

json fit_summary(const FitResult& r) {
  json s;
  s["converged"] = r.converged;
  s["outer_iterations"] = r.outer_iters;
  s["inner_iterations"] = r.inner_iters;
  s["trace"] = r.trace;
  s["phi"] = r.corr.phi;
  s["correlation"] = to_string(r.corr.kind);
  if (r.corr.kind == CorrelationKind::Exchangeable) s["alpha"] = r.corr.alpha;
  if (r.corr.kind == CorrelationKind::Unstructured) {
    std::vector<std::vector<double>> m;
    for (Eigen::Index i = 0; i < r.corr.alpha_matrix.rows(); ++i) {
      std::vector<double> row;
      for (Eigen::Index j = 0; j < r.corr.alpha_matrix.cols(); ++j)
        row.push_back(r.corr.alpha_matrix(i, j));
      m.push_back(std::move(row));
    }
    s["alpha"] = m;
  }
  s["alpha_clamped"] = r.corr.clamped;
  s["active_set"] = r.active_set;
  return s;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  out << text;
}

int cmd_validate(const DataOptions& data_opts) {
  const ClusteredDataset ds = load_data(data_opts);
  const ValidationReport report = validate_dataset(ds);
  if (report.pass) {
    std::cout << "ok: " << ds.n_clusters() << " clusters, " << ds.n_sampled_observations()
              << " observations, p=" << ds.p << "\n";
    return kExitOk;
  }
  for (const auto& f : report.failures) std::cout << "fail: " << f << "\n";
  return kExitInput;
}

int cmd_fit(const DataOptions& data_opts, const FitOptions& fit_opts, const std::string& out_prefix) {
  const ClusteredDataset ds = load_data(data_opts);
  const PenaltySpec penalty = build_penalty(fit_opts, ds);
  const CorrelationKind kind = parse_correlation(fit_opts.corstr);
  const Eigen::VectorXd init = initial_coefficients(fit_opts.init, ds);
  const FitResult result = fit(ds, penalty, fit_opts.solver, kind, init);

  write_coefficients(out_prefix + "_coefficients.csv", ds, result);
  json summary = fit_summary(result);
  summary["penalty"] = fit_opts.penalty;
  summary["lambda"] = penalty.lambda;
  write_text(out_prefix + "_summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  return result.converged ? kExitOk : kExitNonConvergence;
}

int cmd_select(const DataOptions& data_opts, const FitOptions& fit_opts, const CvOptions& cv_opts,
               const std::string& rule, const std::string& out_prefix) {
  const ClusteredDataset ds = load_data(data_opts);
  FitOptions penalized = fit_opts;
  if (penalized.penalty == "none") penalized.penalty = "scad";
  const PenaltySpec penalty = build_penalty(penalized, ds);
  const CorrelationKind kind = parse_correlation(fit_opts.corstr);
  const CvSelection sel = run_cv_selection(ds, penalty, fit_opts.solver, kind, cv_opts);

  {
    std::ofstream out(out_prefix + "_cv.csv");
    if (!out) throw DataError("cannot write cv curve");
    out << "lambda,mu,n_valid_folds\n";
    for (Eigen::Index g = 0; g < sel.curve.lambdas.size(); ++g)
      out << fmt_double(sel.curve.lambdas[g]) << "," << fmt_double(sel.curve.mu[g]) << ","
          << sel.curve.n_valid_folds[static_cast<std::size_t>(g)] << "\n";
  }
  const FitResult& chosen = rule == "1se" ? sel.fit_1se : sel.fit_cv;
  write_coefficients(out_prefix + "_selected.csv", ds, chosen);

  json summary;
  summary["lambda_cv"] = sel.curve.lambda_cv;
  summary["lambda_1se"] = sel.curve.lambda_1se;
  summary["se_at_cvmin"] = sel.curve.se_at_cvmin;
  summary["rule"] = rule;
  summary["warnings"] = sel.curve.warnings;
  summary["fit"] = fit_summary(chosen);
  write_text(out_prefix + "_summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  return chosen.converged ? kExitOk : kExitNonConvergence;
}

int cmd_variance(const DataOptions& data_opts, const FitOptions& fit_opts, ResampleConfig rconfig,
                 const std::string& out_prefix) {
  const ClusteredDataset ds = load_data(data_opts);
  const PenaltySpec penalty = build_penalty(fit_opts, ds);
  const CorrelationKind kind = parse_correlation(fit_opts.corstr);
  const Eigen::VectorXd init = initial_coefficients(fit_opts.init, ds);
  const FitResult point = fit(ds, penalty, fit_opts.solver, kind, init);
  if (!point.converged) {
    std::cerr << "error: point fit did not converge; variance not computed\n";
    return kExitNonConvergence;
  }
  const VarianceResult vr = resample_variance(ds, point, rconfig, fit_opts.solver, kind);

  {
    std::ofstream out(out_prefix + "_variance.csv");
    if (!out) throw DataError("cannot write variance table");
    out << "name,estimate,se,ci_lo,ci_hi\n";
    for (std::size_t j = 0; j < vr.coef_indices.size(); ++j) {
      const Eigen::Index jj = static_cast<Eigen::Index>(j);
      out << vr.coef_names[j] << "," << fmt_double(vr.estimates[jj]) << ","
          << fmt_double(vr.se[jj]) << "," << fmt_double(vr.ci_lo[jj]) << ","
          << fmt_double(vr.ci_hi[jj]) << "\n";
    }
  }
  json summary;
  summary["B_requested"] = vr.B_requested;
  summary["B_effective"] = vr.B_effective;
  summary["reliable"] = vr.reliable;
  if (!vr.note.empty()) summary["note"] = vr.note;
  write_text(out_prefix + "_summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  return kExitOk;
}

int cmd_km(const DataOptions& data_opts, const std::string& beta_arg, const std::string& out_path) {
  const ClusteredDataset ds = load_data(data_opts);
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(ds.p);
  if (!beta_arg.empty()) {
    const auto parts = split_commas(beta_arg);
    if (static_cast<int>(parts.size()) != ds.p)
      throw DataError("--beta needs " + std::to_string(ds.p) + " comma-separated values");
    for (int j = 0; j < ds.p; ++j) beta[j] = std::stod(parts[static_cast<std::size_t>(j)]);
  }
  const WeightedSurvival surv = fit_weighted_km(ds, beta);
  std::ostringstream out;
  out << "t,F\n";
  for (std::size_t j = 0; j < surv.n_jumps(); ++j)
    out << fmt_double(surv.jump_points[j]) << "," << fmt_double(1.0 - surv.survival_after[j])
        << "\n";
  if (out_path.empty())
    std::cout << out.str();
  else
    write_text(out_path, out.str());
  return kExitOk;
}

// --- simulate -----------------------------------------------------------------

std::map<std::string, std::string> read_flat_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open scenario file: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  long row = 0;
  while (std::getline(in, line)) {
    ++row;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      if (detail::trim(line).empty()) continue;
      throw DataError("scenario file line " + std::to_string(row) + ": expected key = value");
    }
    kv[detail::trim(line.substr(0, eq))] = detail::trim(line.substr(eq + 1));
  }
  return kv;
}

Eigen::VectorXd parse_vector(const std::string& s) {
  const auto parts = split_commas(s);
  Eigen::VectorXd v(static_cast<Eigen::Index>(parts.size()));
  for (std::size_t j = 0; j < parts.size(); ++j) v[static_cast<Eigen::Index>(j)] = std::stod(parts[j]);
  return v;
}

SimulationScenario scenario_from_config(const std::map<std::string, std::string>& kv,
                                        std::vector<MethodSpec>& methods) {
  SimulationScenario sc = default_scenario();
  auto get = [&](const char* key) -> std::optional<std::string> {
    const auto it = kv.find(key);
    if (it == kv.end()) return std::nullopt;
    return it->second;
  };
  if (auto v = get("n_cohort")) sc.N_cohort = std::stoi(*v);
  if (auto v = get("cluster_size")) sc.K = std::stoi(*v);
  if (auto v = get("p")) sc.p = std::stoi(*v);
  if (auto v = get("beta_true")) sc.beta_true = parse_vector(*v);
  if (static_cast<int>(sc.beta_true.size()) != sc.p) {
    if (!get("beta_true")) {
      // p changed without an explicit vector: keep the default support pattern, resized
      Eigen::VectorXd b = Eigen::VectorXd::Zero(sc.p);
      const Eigen::VectorXd d = default_scenario().beta_true;
      for (int j = 0; j < std::min<int>(sc.p, static_cast<int>(d.size())); ++j) b[j] = d[j];
      sc.beta_true = b;
    }
  }
  if (auto v = get("error_marginal")) sc.error_marginal = parse_marginal(*v);
  if (auto v = get("kendall_tau")) sc.kendall_tau = std::stod(*v);
  if (auto v = get("censoring_target")) sc.censoring_target = std::stod(*v);
  if (auto v = get("inclusion_probs")) sc.inclusion_probs = parse_vector(*v);
  if (static_cast<int>(sc.inclusion_probs.size()) != sc.K + 1 && !get("inclusion_probs")) {
    sc.inclusion_probs = Eigen::VectorXd::Constant(sc.K + 1, 0.2);
  }
  if (auto v = get("replications")) sc.replications = std::stoi(*v);
  if (auto v = get("seed")) sc.seed = std::stoull(*v);
  if (auto v = get("cv_folds")) sc.cv_folds = std::stoi(*v);
  if (auto v = get("n_lambda")) sc.n_lambda = std::stoi(*v);
  if (auto v = get("lambda_min_ratio")) sc.lambda_min_ratio = std::stod(*v);
  if (auto v = get("variance_replicates")) sc.variance_replicates = std::stoi(*v);
  if (auto v = get("ci_level")) sc.ci_level = std::stod(*v);
  if (auto v = get("gamma")) sc.solver.gamma = std::stod(*v);
  if (auto v = get("zeta")) sc.solver.zeta = std::stod(*v);
  if (auto v = get("max_inner")) sc.solver.max_inner = std::stoi(*v);
  if (auto v = get("max_outer")) sc.solver.max_outer = std::stoi(*v);
  if (auto v = get("coef_cutoff")) sc.solver.coef_cutoff = std::stod(*v);
  if (auto v = get("methods")) {
    methods.clear();
    for (const auto& token : split_commas(*v)) methods.push_back(parse_method(token));
  }
  return sc;
}

int cmd_simulate(const std::string& scenario_path, int reps_override, long long seed_override,
                 int workers, const std::string& out_dir) {
  std::vector<MethodSpec> methods = {
      parse_method("weighted:ex:scad-cv"),
      parse_method("weighted:ex:scad-1se"),
      parse_method("weighted:ex:oracle"),
  };
  SimulationScenario sc = default_scenario();
  if (!scenario_path.empty()) sc = scenario_from_config(read_flat_config(scenario_path), methods);
  if (reps_override > 0) sc.replications = reps_override;
  if (seed_override >= 0) sc.seed = static_cast<std::uint64_t>(seed_override);

  const StudyResult study = run_study(sc, methods, workers);

  std::filesystem::create_directories(out_dir);
  {
    std::ofstream out(out_dir + "/selection.csv");
    out << "method,TP,FP,C,ME,MSE,n_reps\n";
    for (const auto& m : study.methods)
      out << m.method.label() << "," << fmt_double(m.selection.TP) << ","
          << fmt_double(m.selection.FP) << "," << fmt_double(m.selection.C_pct) << ","
          << fmt_double(m.selection.ME_median) << "," << fmt_double(m.selection.MSE_mean) << ","
          << m.selection.n_reps << "\n";
  }
  {
    std::ofstream out(out_dir + "/estimation.csv");
    out << "method,N_c,BR,SE_a,SE_e,CP\n";
    for (const auto& m : study.methods) {
      if (!m.estimation) continue;
      out << m.method.label() << "," << m.estimation->N_c << ","
          << fmt_double(m.estimation->BR_pct) << "," << fmt_double(m.estimation->SE_a) << ","
          << fmt_double(m.estimation->SE_e) << "," << fmt_double(m.estimation->CP_pct) << "\n";
    }
  }
  {
    std::ofstream out(out_dir + "/replications.csv");
    out << study_raw_header() << "\n";
    for (const auto& row : study.raw_rows) out << row << "\n";
  }
  json summary;
  summary["kappa"] = study.kappa;
  summary["mean_cohort_censoring"] = study.mean_cohort_censoring;
  summary["replications"] = study.replications;
  summary["failures"] = study.failures;
  summary["failure_log"] = study.failure_log;
  write_text(out_dir + "/summary.json", summary.dump(2) + "\n");
  std::cout << summary.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"penalized weighted estimation for clustered censored failure times under stratified sampling"};
  app.require_subcommand(1);
  app.set_config("--config");

  DataOptions data_opts;
  FitOptions fit_opts;
  std::string out_prefix = "strataft";
  std::string rule = "cv";
  std::string beta_arg;
  std::string km_out;
  CvOptions cv_opts;
  ResampleConfig rconfig;
  std::string scenario_path;
  int reps_override = 0;
  long long seed_override = -1;
  int workers = static_cast<int>(std::thread::hardware_concurrency());
  std::string sim_out = "simulation_out";
  std::string multiplier = "exp";

  auto* validate_cmd = app.add_subcommand("validate", "check a dataset against the schema and invariants");
  add_data_options(validate_cmd, data_opts);

  auto* fit_cmd = app.add_subcommand("fit", "penalized weighted estimating-equation fit");
  add_data_options(fit_cmd, data_opts);
  add_fit_options(fit_cmd, fit_opts);
  fit_cmd->add_option("--out", out_prefix, "output prefix");

  auto* select_cmd = app.add_subcommand("select", "cross-validated tuning parameter selection");
  add_data_options(select_cmd, data_opts);
  add_fit_options(select_cmd, fit_opts);
  select_cmd->add_option("--out", out_prefix, "output prefix");
  select_cmd->add_option("--folds", cv_opts.folds, "number of stratified folds");
  select_cmd->add_option("--n-lambda", cv_opts.n_lambda, "grid size");
  select_cmd->add_option("--lambda-min-ratio", cv_opts.lambda_min_ratio, "grid lower end ratio");
  select_cmd->add_option("--rule", rule, "cv or 1se")->check(CLI::IsMember({"cv", "1se"}));
  select_cmd->add_option("--seed", cv_opts.seed, "fold assignment seed")->envname("STRATAFT_SEED");

  auto* variance_cmd = app.add_subcommand("variance", "post-selection resampling variance");
  add_data_options(variance_cmd, data_opts);
  add_fit_options(variance_cmd, fit_opts);
  variance_cmd->add_option("--out", out_prefix, "output prefix");
  variance_cmd->add_option("--replicates", rconfig.B, "number of perturbation replicates");
  variance_cmd->add_option("--level", rconfig.level, "confidence level");
  variance_cmd->add_option("--multiplier", multiplier, "exp or twopoint")
      ->check(CLI::IsMember({"exp", "twopoint"}));
  variance_cmd->add_option("--seed", rconfig.seed, "perturbation seed")->envname("STRATAFT_SEED");
  variance_cmd->add_option("--workers", rconfig.workers, "parallel replicates");

  auto* simulate_cmd = app.add_subcommand("simulate", "Monte Carlo study");
  simulate_cmd->add_option("--scenario", scenario_path, "scenario config file (key = value)");
  simulate_cmd->add_option("--reps", reps_override, "override replication count");
  simulate_cmd->add_option("--seed", seed_override, "override seed")->envname("STRATAFT_SEED");
  simulate_cmd->add_option("--workers", workers, "parallel replications");
  simulate_cmd->add_option("--out", sim_out, "output directory");

  auto* km_cmd = app.add_subcommand("km", "weighted pooled Kaplan-Meier of residuals (debug)");
  add_data_options(km_cmd, data_opts);
  km_cmd->add_option("--beta", beta_arg, "comma-separated coefficients (default zeros)");
  km_cmd->add_option("--out", km_out, "output CSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInput;
  }

  try {
    if (validate_cmd->parsed()) return cmd_validate(data_opts);
    if (fit_cmd->parsed()) return cmd_fit(data_opts, fit_opts, out_prefix);
    if (select_cmd->parsed()) return cmd_select(data_opts, fit_opts, cv_opts, rule, out_prefix);
    if (variance_cmd->parsed()) {
      rconfig.law = parse_multiplier_law(multiplier);
      return cmd_variance(data_opts, fit_opts, rconfig, out_prefix);
    }
    if (simulate_cmd->parsed())
      return cmd_simulate(scenario_path, reps_override, seed_override, workers, sim_out);
    if (km_cmd->parsed()) return cmd_km(data_opts, beta_arg, km_out);
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const ConvergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNonConvergence;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitInput;
}
