#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "gfv/error.hpp"

namespace gfv {

enum class PairDecision { similar, dissimilar };

/// Strict comparison: a distance equal to lambda is rejected.
inline PairDecision classify_pair(double d, double lambda) {
  return d < lambda ? PairDecision::similar : PairDecision::dissimilar;
}

struct MetricsReport {
  std::string country;
  double lambda = 0.0;
  double tar = 0.0, frr = 0.0, far = 0.0;
  long x1 = 0;  // similar pairs accepted
  long x2 = 0;  // similar pairs rejected
  long x3 = 0;  // dissimilar pairs accepted
  long X1 = 0;  // similar pairs
  long X2 = 0;  // dissimilar pairs
};

/// TAR = x1/X1, FRR = x2/X1 with x2 = X1 - x1 (similar pairs at d >= lambda),
/// FAR = x3/X2.
inline MetricsReport compute_metrics(const std::vector<double>& sim, const std::vector<double>& dis, double lambda,
                                     const std::string& country = {}) {
  if (sim.empty() || dis.empty()) fail(ErrorCode::EmptyList, "distance lists must be non-empty");
  MetricsReport r;
  r.country = country;
  r.lambda = lambda;
  r.X1 = static_cast<long>(sim.size());
  r.X2 = static_cast<long>(dis.size());
  r.x1 = static_cast<long>(std::count_if(sim.begin(), sim.end(), [&](double d) { return d < lambda; }));
  r.x2 = r.X1 - r.x1;
  r.x3 = static_cast<long>(std::count_if(dis.begin(), dis.end(), [&](double d) { return d < lambda; }));
  r.tar = static_cast<double>(r.x1) / static_cast<double>(r.X1);
  r.frr = static_cast<double>(r.x2) / static_cast<double>(r.X1);
  r.far = static_cast<double>(r.x3) / static_cast<double>(r.X2);
  return r;
}

struct RocPoint {
  double lambda = 0.0;
  double far = 0.0;
  double tar = 0.0;
};

/// Thresholds: 0, every midpoint between consecutive distinct pooled
/// distances, and the next double above the largest distance.
inline std::vector<RocPoint> roc_curve(const std::vector<double>& sim, const std::vector<double>& dis) {
  if (sim.empty() || dis.empty()) fail(ErrorCode::EmptyList, "distance lists must be non-empty");
  std::vector<double> pooled(sim);
  pooled.insert(pooled.end(), dis.begin(), dis.end());
  std::sort(pooled.begin(), pooled.end());
  pooled.erase(std::unique(pooled.begin(), pooled.end()), pooled.end());

  std::vector<double> lambdas{0.0};
  for (std::size_t k = 0; k + 1 < pooled.size(); ++k) lambdas.push_back(0.5 * (pooled[k] + pooled[k + 1]));
  lambdas.push_back(std::nextafter(pooled.back(), std::numeric_limits<double>::infinity()));
  std::sort(lambdas.begin(), lambdas.end());
  lambdas.erase(std::unique(lambdas.begin(), lambdas.end()), lambdas.end());

  std::vector<RocPoint> out;
  out.reserve(lambdas.size());
  for (double l : lambdas) {
    const MetricsReport m = compute_metrics(sim, dis, l);
    out.push_back({l, m.far, m.tar});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report export
// ---------------------------------------------------------------------------

struct CountryEvaluation {
  MetricsReport metrics;
  std::vector<RocPoint> roc;
  std::vector<double> similar;
  std::vector<double> dissimilar;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
  if (!out) fail(ErrorCode::IoError, "write failed: " + path.string());
}

}  // namespace detail

inline constexpr std::string_view kMetricsHeader = "country,lambda,tar,frr,far,x1,x2,x3,X1,X2";

/// Writes metrics.csv, roc_<country>.csv and distances_<country>.csv.
inline void export_report(const std::vector<CountryEvaluation>& evals, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create " + out_dir.string());
  std::string metrics(kMetricsHeader);
  metrics += '\n';
  for (const auto& e : evals) {
    const auto& m = e.metrics;
    metrics += m.country + "," + detail::fmt_double(m.lambda) + "," + detail::fmt_double(m.tar) + "," +
               detail::fmt_double(m.frr) + "," + detail::fmt_double(m.far) + "," + std::to_string(m.x1) + "," +
               std::to_string(m.x2) + "," + std::to_string(m.x3) + "," + std::to_string(m.X1) + "," +
               std::to_string(m.X2) + "\n";

    std::string roc = "lambda,far,tar\n";
    for (const auto& p : e.roc) {
      roc += detail::fmt_double(p.lambda) + "," + detail::fmt_double(p.far) + "," + detail::fmt_double(p.tar) + "\n";
    }
    detail::write_text(out_dir / ("roc_" + m.country + ".csv"), roc);

    std::string dist = "class,distance\n";
    for (double d : e.similar) dist += "similar," + detail::fmt_double(d) + "\n";
    for (double d : e.dissimilar) dist += "dissimilar," + detail::fmt_double(d) + "\n";
    detail::write_text(out_dir / ("distances_" + m.country + ".csv"), dist);
  }
  detail::write_text(out_dir / "metrics.csv", metrics);
}

inline std::vector<MetricsReport> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::FileNotFound, path.string());
  std::string line;
  std::getline(in, line);
  if (line != kMetricsHeader) fail(ErrorCode::InvalidArgument, "unexpected metrics header in " + path.string());
  std::vector<MetricsReport> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 10) fail(ErrorCode::InvalidArgument, "bad metrics row: " + line);
    MetricsReport m;
    m.country = f[0];
    m.lambda = std::stod(f[1]);
    m.tar = std::stod(f[2]);
    m.frr = std::stod(f[3]);
    m.far = std::stod(f[4]);
    m.x1 = std::stol(f[5]);
    m.x2 = std::stol(f[6]);
    m.x3 = std::stol(f[7]);
    m.X1 = std::stol(f[8]);
    m.X2 = std::stol(f[9]);
    out.push_back(m);
  }
  return out;
}

}  // namespace gfv
