#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfv/dataset.hpp"
#include "gfv/error.hpp"
#include "gfv/network.hpp"

namespace gfv {

struct PairDistances {
  std::vector<double> similar;
  std::vector<double> dissimilar;
};

/// Eval-mode distances of each pair, split by label, input order preserved
/// within each list. Embeddings are computed once per document.
template <typename T, typename Preprocessor>
PairDistances compute_distances(const SiameseParams<T>& params, const std::vector<PairSample>& pairs,
                                Preprocessor&& preprocess_record) {
  std::map<std::string, FeatureVector> embedded;
  auto embed = [&](const DocumentRecord& r) -> const FeatureVector& {
    auto it = embedded.find(r.id);
    if (it == embedded.end()) it = embedded.emplace(r.id, forward_branch(params, preprocess_record(r))).first;
    return it->second;
  };
  PairDistances out;
  for (const auto& p : pairs) {
    const double d = pair_distance(embed(p.a), embed(p.b));
    (p.c == 1 ? out.similar : out.dissimilar).push_back(d);
  }
  return out;
}

struct DistanceStats {
  std::string country;
  double sim_min = 0.0, sim_max = 0.0;
  double dis_min = 0.0, dis_max = 0.0;
  std::size_t n_sim = 0, n_dis = 0;
  std::vector<double> similar, dissimilar;  // kept for histograms
};

inline DistanceStats distance_stats(const std::vector<double>& sim, const std::vector<double>& dis,
                                    const std::string& country) {
  if (sim.empty() || dis.empty()) fail(ErrorCode::EmptyList, "distance lists must be non-empty (" + country + ")");
  DistanceStats s;
  s.country = country;
  const auto [smin, smax] = std::minmax_element(sim.begin(), sim.end());
  const auto [dmin, dmax] = std::minmax_element(dis.begin(), dis.end());
  s.sim_min = *smin;
  s.sim_max = *smax;
  s.dis_min = *dmin;
  s.dis_max = *dmax;
  s.n_sim = sim.size();
  s.n_dis = dis.size();
  s.similar = sim;
  s.dissimilar = dis;
  return s;
}

struct ThresholdRecord {
  std::string country;
  double lambda = 0.0;
  double range_lo = 0.0;
  double range_hi = 0.0;
  bool overlap = false;
  double calibration_accuracy = 0.0;
};

/// Pairs classified correctly at threshold lambda: similar below, dissimilar
/// at or above.
inline std::size_t correct_at(const std::vector<double>& sim, const std::vector<double>& dis, double lambda) {
  const auto s = std::count_if(sim.begin(), sim.end(), [&](double d) { return d < lambda; });
  const auto k = std::count_if(dis.begin(), dis.end(), [&](double d) { return d >= lambda; });
  return static_cast<std::size_t>(s + k);
}

/// Separated distributions: the whole gap [sim_max, dis_min], lambda at its
/// centre. Overlapping ones: accuracy is piecewise constant between
/// consecutive distinct pooled distances; the widest contiguous run of
/// maximum accuracy becomes the range (ties go to the smaller lambda).
inline ThresholdRecord determine_threshold(const DistanceStats& stats, const std::vector<double>& sim,
                                           const std::vector<double>& dis) {
  if (sim.empty() || dis.empty()) fail(ErrorCode::EmptyList, "distance lists must be non-empty");
  ThresholdRecord t;
  t.country = stats.country;
  const double n = static_cast<double>(sim.size() + dis.size());
  if (stats.sim_max < stats.dis_min) {
    t.overlap = false;
    t.range_lo = stats.sim_max;
    t.range_hi = stats.dis_min;
    t.lambda = 0.5 * (t.range_lo + t.range_hi);
    t.calibration_accuracy = static_cast<double>(correct_at(sim, dis, t.lambda)) / n;
    return t;
  }

  t.overlap = true;
  std::vector<double> pooled(sim);
  pooled.insert(pooled.end(), dis.begin(), dis.end());
  std::sort(pooled.begin(), pooled.end());
  pooled.erase(std::unique(pooled.begin(), pooled.end()), pooled.end());
  if (pooled.size() < 2) {
    // Every distance identical: nothing to sweep.
    t.range_lo = t.range_hi = t.lambda = pooled.front();
    t.calibration_accuracy = static_cast<double>(correct_at(sim, dis, t.lambda)) / n;
    return t;
  }
  std::vector<std::size_t> correct(pooled.size() - 1);
  std::size_t best = 0;
  for (std::size_t k = 0; k + 1 < pooled.size(); ++k) {
    correct[k] = correct_at(sim, dis, 0.5 * (pooled[k] + pooled[k + 1]));
    best = std::max(best, correct[k]);
  }
  double best_lo = 0.0, best_hi = 0.0;
  bool found = false;
  for (std::size_t k = 0; k < correct.size();) {
    if (correct[k] != best) {
      ++k;
      continue;
    }
    std::size_t j = k;
    while (j + 1 < correct.size() && correct[j + 1] == best) ++j;
    const double lo = pooled[k], hi = pooled[j + 1];
    // Runs are visited in increasing lambda, so strict '>' keeps the smaller
    // lambda on equal width.
    if (!found || hi - lo > best_hi - best_lo) {
      best_lo = lo;
      best_hi = hi;
      found = true;
    }
    k = j + 1;
  }
  t.range_lo = best_lo;
  t.range_hi = best_hi;
  t.lambda = 0.5 * (best_lo + best_hi);
  t.calibration_accuracy = static_cast<double>(correct_at(sim, dis, t.lambda)) / n;
  return t;
}

// ---------------------------------------------------------------------------
// Threshold table persistence
// ---------------------------------------------------------------------------

inline constexpr std::string_view kThresholdFormat = "gfv-thresholds/1";

struct ThresholdTable {
  std::vector<ThresholdRecord> entries;

  const ThresholdRecord* find(std::string_view country) const {
    for (const auto& e : entries)
      if (e.country == country) return &e;
    return nullptr;
  }
};

inline std::string serialize_thresholds(const ThresholdTable& table) {
  nlohmann::ordered_json j;
  j["format"] = std::string(kThresholdFormat);
  j["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : table.entries) {
    nlohmann::ordered_json row;
    row["country"] = e.country;
    row["lambda"] = e.lambda;
    row["range"] = {e.range_lo, e.range_hi};
    row["overlap"] = e.overlap;
    row["calibration_accuracy"] = e.calibration_accuracy;
    j["entries"].push_back(row);
  }
  return j.dump(2) + "\n";
}

inline ThresholdTable parse_thresholds(std::string_view text) {
  ThresholdTable t;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.value("format", std::string()) != kThresholdFormat) {
      fail(ErrorCode::InvalidArgument, "not a gfv threshold table");
    }
    for (const auto& e : j.at("entries")) {
      ThresholdRecord r;
      r.country = e.at("country").get<std::string>();
      r.lambda = e.at("lambda").get<double>();
      r.range_lo = e.at("range").at(0).get<double>();
      r.range_hi = e.at("range").at(1).get<double>();
      r.overlap = e.at("overlap").get<bool>();
      r.calibration_accuracy = e.value("calibration_accuracy", 0.0);
      t.entries.push_back(r);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("malformed threshold table: ") + e.what());
  }
  return t;
}

inline void write_thresholds(const ThresholdTable& t, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << serialize_thresholds(t);
}

inline ThresholdTable read_thresholds(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::FileNotFound, path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_thresholds(ss.str());
}

}  // namespace gfv
