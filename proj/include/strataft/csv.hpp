#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "strataft/dataset.hpp"
#include "strataft/errors.hpp"

namespace strataft {

/// Shortest decimal that round-trips a double exactly.
inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  return fields;
}

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& s, long row, const char* what) {
  const std::string t = trim(s);
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (t.empty() || end != t.c_str() + t.size() || !std::isfinite(v)) {
    std::ostringstream msg;
    msg << "row " << row << ": cannot parse " << what << " from '" << s << "'";
    throw DataError(msg.str());
  }
  return v;
}

inline long long parse_int(const std::string& s, long row, const char* what) {
  const std::string t = trim(s);
  char* end = nullptr;
  const long long v = std::strtoll(t.c_str(), &end, 10);
  if (t.empty() || end != t.c_str() + t.size()) {
    std::ostringstream msg;
    msg << "row " << row << ": cannot parse " << what << " from '" << s << "'";
    throw DataError(msg.str());
  }
  return v;
}

}  // namespace detail

/// Companion file of per-stratum counts: header `stratum,n,n_sampled`, one row per stratum.
inline std::map<int, StratumCount> load_strata_counts_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open strata counts file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("strata counts file is empty: " + path);
  std::map<int, StratumCount> counts;
  long row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 3) {
      std::ostringstream msg;
      msg << "row " << row << ": expected 3 fields (stratum,n,n_sampled), got " << f.size();
      throw DataError(msg.str());
    }
    const int s = static_cast<int>(detail::parse_int(f[0], row, "stratum"));
    StratumCount c;
    c.cohort = detail::parse_int(f[1], row, "cohort count");
    c.sampled = detail::parse_int(f[2], row, "sampled count");
    counts[s] = c;
  }
  return counts;
}

/// Dataset CSV, one row per cluster member:
///   cluster_id,member_id,time,status,stratum,<covariate columns...>
/// Times are positive on the natural scale and log-transformed at load. When a strata
/// counts map is supplied the file is treated as the sampled subcohort and weights are
/// rebuilt from the counts; otherwise every cluster counts as sampled with weight 1.
inline ClusteredDataset load_dataset_csv(const std::string& path,
                                         std::optional<std::map<int, StratumCount>> counts =
                                             std::nullopt) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open data file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("data file is empty: " + path);
  const auto header = detail::split_csv_line(line);
  if (header.size() < 6 || detail::trim(header[0]) != "cluster_id" ||
      detail::trim(header[1]) != "member_id" || detail::trim(header[2]) != "time" ||
      detail::trim(header[3]) != "status" || detail::trim(header[4]) != "stratum")
    throw DataError("header must be cluster_id,member_id,time,status,stratum,x1,...");

  ClusteredDataset ds;
  ds.p = static_cast<int>(header.size()) - 5;
  for (std::size_t j = 5; j < header.size(); ++j)
    ds.covariate_names.push_back(detail::trim(header[j]));

  std::map<std::string, int> index_of;
  long row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (static_cast<int>(f.size()) != 5 + ds.p) {
      std::ostringstream msg;
      msg << "row " << row << ": expected " << 5 + ds.p << " fields, got " << f.size();
      throw DataError(msg.str());
    }
    const std::string id = detail::trim(f[0]);
    const double time = detail::parse_double(f[2], row, "time");
    if (time <= 0.0) {
      std::ostringstream msg;
      msg << "row " << row << ": time must be positive (got " << f[2] << ")";
      throw DataError(msg.str());
    }
    const long long status = detail::parse_int(f[3], row, "status");
    if (status != 0 && status != 1) {
      std::ostringstream msg;
      msg << "row " << row << ": status must be 0 or 1 (got " << f[3] << ")";
      throw DataError(msg.str());
    }
    const long long stratum = detail::parse_int(f[4], row, "stratum");
    if (stratum < 1) {
      std::ostringstream msg;
      msg << "row " << row << ": stratum must be a positive integer";
      throw DataError(msg.str());
    }

    Observation obs;
    obs.log_time = std::log(time);
    obs.event = status == 1;
    obs.covariates.resize(ds.p);
    for (int j = 0; j < ds.p; ++j)
      obs.covariates[j] = detail::parse_double(f[static_cast<std::size_t>(5 + j)], row, "covariate");

    auto it = index_of.find(id);
    if (it == index_of.end()) {
      it = index_of.emplace(id, ds.n_clusters()).first;
      Cluster c;
      c.id = id;
      c.stratum = static_cast<int>(stratum);
      c.sampled = true;
      ds.clusters.push_back(std::move(c));
    }
    Cluster& c = ds.clusters[static_cast<std::size_t>(it->second)];
    if (c.stratum != static_cast<int>(stratum)) {
      std::ostringstream msg;
      msg << "row " << row << ": cluster " << id << " changes stratum";
      throw DataError(msg.str());
    }
    c.members.push_back(std::move(obs));
  }
  if (ds.clusters.empty()) throw DataError("data file has no records: " + path);

  std::vector<int> strata;
  std::vector<bool> sampled;
  for (const auto& c : ds.clusters) {
    strata.push_back(c.stratum);
    sampled.push_back(c.sampled);
  }
  if (counts) {
    ds.strata_counts = std::move(*counts);
  } else {
    for (const auto& c : ds.clusters) {
      auto& cnt = ds.strata_counts[c.stratum];
      cnt.cohort += 1;
      cnt.sampled += 1;
    }
  }
  ds.weights = compute_weights(ds.strata_counts, strata, sampled);
  return ds;
}

/// Write the sampled clusters back out in the ingestion schema (natural-scale times).
inline void write_dataset_csv(const ClusteredDataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write data file: " + path);
  const auto names = ds.names_or_default();
  out << "cluster_id,member_id,time,status,stratum";
  for (const auto& n : names) out << "," << n;
  out << "\n";
  for (std::size_t i = 0; i < ds.clusters.size(); ++i) {
    const Cluster& c = ds.clusters[i];
    if (!c.sampled) continue;
    const std::string id = c.id.empty() ? std::to_string(i + 1) : c.id;
    for (std::size_t k = 0; k < c.members.size(); ++k) {
      const Observation& obs = c.members[k];
      out << id << "," << (k + 1) << "," << fmt_double(std::exp(obs.log_time)) << ","
          << (obs.event ? 1 : 0) << "," << c.stratum;
      for (int j = 0; j < ds.p; ++j) out << "," << fmt_double(obs.covariates[j]);
      out << "\n";
    }
  }
}

inline void write_strata_counts_csv(const std::map<int, StratumCount>& counts,
                                    const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write strata counts file: " + path);
  out << "stratum,n,n_sampled\n";
  for (const auto& [s, c] : counts) out << s << "," << c.cohort << "," << c.sampled << "\n";
}

}  // namespace strataft
