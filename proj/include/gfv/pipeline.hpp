#pragma once

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfv/calibration.hpp"
#include "gfv/checkpoint.hpp"
#include "gfv/dataset.hpp"
#include "gfv/evaluation.hpp"
#include "gfv/training.hpp"

namespace gfv {

struct RunConfig {
  std::filesystem::path root;        // corpus root (forge) or run directory
  std::filesystem::path out;         // output directory
  std::filesystem::path manifest;    // defaults to <root>/manifest.jsonl
  std::filesystem::path thresholds;  // defaults to <root>/thresholds.json
  std::filesystem::path checkpoint;  // defaults to <root>/model.ckpt
  int block_size = 64;
  int zones_per_doc = 1;
  int resolution = 300;
  double train_fraction = 2.0 / 3.0;
  int similar_pairs = 40;
  int dissimilar_pairs = 40;
  std::vector<std::string> countries;  // empty: every country in the manifest
  bool per_country_model = false;
  bool cross_source = false;
  Split calibration_split = Split::train;
  std::optional<double> lambda;  // evaluate at this threshold instead of the calibrated one
  TrainConfig train;
  std::function<void(const std::string&)> log;

  ArchitectureConfig arch() const { return ArchitectureConfig::with_resolution(resolution); }
  std::uint64_t seed() const { return train.seed; }

  std::filesystem::path manifest_path() const {
    return manifest.empty() ? root / "manifest.jsonl" : manifest;
  }
  std::filesystem::path thresholds_path() const {
    return thresholds.empty() ? root / "thresholds.json" : thresholds;
  }
  std::filesystem::path checkpoint_path(const std::string& country = {}) const {
    if (!checkpoint.empty() && country.empty()) return checkpoint;
    const std::filesystem::path dir = checkpoint.empty() ? root : checkpoint.parent_path();
    if (!country.empty() && per_country_model) return dir / ("model_" + country + ".ckpt");
    return checkpoint.empty() ? root / "model.ckpt" : checkpoint;
  }

  void note(const std::string& msg) const {
    if (log) log(msg);
  }
};

namespace detail {

inline std::vector<std::string> countries_of(const Manifest& m, const std::vector<std::string>& wanted) {
  std::vector<std::string> out;
  for (const auto& r : m.records)
    if (std::find(out.begin(), out.end(), r.country) == out.end()) out.push_back(r.country);
  std::sort(out.begin(), out.end());
  if (wanted.empty()) return out;
  for (const auto& c : wanted) {
    if (std::find(out.begin(), out.end(), c) == out.end()) {
      fail(ErrorCode::UnknownCountry, "country '" + c + "' does not occur in the manifest");
    }
  }
  std::vector<std::string> sel(wanted);
  std::sort(sel.begin(), sel.end());
  sel.erase(std::unique(sel.begin(), sel.end()), sel.end());
  return sel;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace detail

/// run.json holds the effective configuration of every command run into the
/// output directory, keyed by command name. It is the only output file that
/// carries a wall-clock timestamp.
inline void write_run_record(const RunConfig& cfg, const std::string& command) {
  const auto path = cfg.out / "run.json";
  nlohmann::ordered_json all = nlohmann::ordered_json::object();
  if (std::ifstream in(path, std::ios::binary); in) {
    all = nlohmann::ordered_json::parse(in, nullptr, false);
    if (!all.is_object()) all = nlohmann::ordered_json::object();
  }
  nlohmann::ordered_json j;
  j["root"] = cfg.root.string();
  j["manifest"] = cfg.manifest_path().string();
  j["created_at"] = detail::utc_timestamp();
  j["seed"] = cfg.seed();
  j["block_size"] = cfg.block_size;
  j["zones_per_doc"] = cfg.zones_per_doc;
  j["resolution"] = cfg.resolution;
  j["train_fraction"] = cfg.train_fraction;
  j["similar_pairs"] = cfg.similar_pairs;
  j["dissimilar_pairs"] = cfg.dissimilar_pairs;
  j["epochs"] = cfg.train.epochs;
  j["batch_size"] = cfg.train.batch_size;
  j["learning_rate"] = cfg.train.learning_rate;
  j["margin"] = cfg.train.margin;
  j["per_country_model"] = cfg.per_country_model;
  j["calibration_split"] = std::string(to_string(cfg.calibration_split));
  j["cross_source"] = cfg.cross_source;
  j["countries"] = cfg.countries;
  if (cfg.lambda) j["lambda"] = *cfg.lambda;
  all[command] = j;
  detail::write_json(path, all);
}

// ---------------------------------------------------------------------------
// forge: ingest -> copy-move forgeries -> split
// ---------------------------------------------------------------------------

struct ForgeSummary {
  Manifest manifest;
  ForgeReport report;
  IngestReport ingest;
};

inline ForgeSummary cmd_forge(const RunConfig& cfg) {
  ForgeSummary s;
  Manifest genuine = ingest(cfg.root, &s.ingest);
  if (!cfg.countries.empty()) {
    const auto keep = detail::countries_of(genuine, cfg.countries);
    std::erase_if(genuine.records, [&](const DocumentRecord& r) {
      return std::find(keep.begin(), keep.end(), r.country) == keep.end();
    });
  }
  genuine.created_with_seed = cfg.seed();
  const Annotations ann = load_annotations(cfg.root, genuine);
  ForgeOptions opt;
  opt.block_size = cfg.block_size;
  opt.zones_per_doc = cfg.zones_per_doc;
  opt.seed = cfg.seed();
  opt.out_dir = cfg.out;
  ForgeResult forged = generate_forged_set(genuine, opt, ann);
  s.report = std::move(forged.report);
  s.manifest = split(forged.manifest, cfg.train_fraction, cfg.seed());
  write_manifest(s.manifest, cfg.out / "manifest.jsonl");

  nlohmann::ordered_json rep;
  rep["block_size"] = cfg.block_size;
  rep["zones_per_doc"] = cfg.zones_per_doc;
  rep["seed"] = cfg.seed();
  rep["ingest_skipped"] = s.ingest.skipped;
  rep["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : s.report.entries) {
    nlohmann::ordered_json row;
    row["parent"] = e.parent_id;
    row["forged"] = e.forged_id.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(e.forged_id);
    row["candidates"] = e.candidate_count;
    row["zones"] = e.zones_applied;
    row["annotations"] = e.used_annotations;
    if (!e.skip_reason.empty()) row["skipped"] = e.skip_reason;
    rep["entries"].push_back(row);
  }
  detail::write_json(cfg.out / "forge_report.json", rep);
  write_run_record(cfg, "forge");
  cfg.note("forged " + std::to_string(s.report.entries.size() - s.report.skipped()) + " of " +
           std::to_string(s.report.entries.size()) + " documents");
  return s;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline std::vector<PairSample> training_pairs(const RunConfig& cfg, const Manifest& m, const std::string& country) {
  return sample_pairs(m, country, cfg.similar_pairs, cfg.dissimilar_pairs, Split::train,
                      derive_seed(cfg.seed(), "train-pairs"), PairOptions{cfg.cross_source});
}

struct TrainSummary {
  std::vector<std::string> countries;
  std::vector<LossTrace> traces;  // one per model
};

inline TrainSummary cmd_train(const RunConfig& cfg) {
  const Manifest m = read_manifest(cfg.manifest_path());
  const auto arch = cfg.arch();
  TrainSummary s;
  s.countries = detail::countries_of(m, cfg.countries);
  TensorCache cache(arch.input_h, arch.input_w);
  auto pre = [&](const DocumentRecord& r) -> const InputTensor& { return cache.get(r); };
  auto progress = [&](int epoch, double loss) {
    cfg.note("epoch " + std::to_string(epoch) + " loss " + std::to_string(loss));
  };

  std::filesystem::create_directories(cfg.out);
  if (cfg.per_country_model) {
    for (const auto& c : s.countries) {
      TrainResult r = train(cfg.train, arch, training_pairs(cfg, m, c), pre, progress);
      save_checkpoint(r.params, cfg.out / ("model_" + c + ".ckpt"));
      r.trace.write_csv(cfg.out / ("loss_trace_" + c + ".csv"));
      s.traces.push_back(std::move(r.trace));
    }
  } else {
    std::vector<PairSample> pooled;
    for (const auto& c : s.countries) {
      auto p = training_pairs(cfg, m, c);
      pooled.insert(pooled.end(), p.begin(), p.end());
    }
    TrainResult r = train(cfg.train, arch, std::move(pooled), pre, progress);
    save_checkpoint(r.params, cfg.out / "model.ckpt");
    r.trace.write_csv(cfg.out / "loss_trace.csv");
    s.traces.push_back(std::move(r.trace));
  }
  write_run_record(cfg, "train");
  return s;
}

// ---------------------------------------------------------------------------
// calibrate
// ---------------------------------------------------------------------------

inline ThresholdTable cmd_calibrate(const RunConfig& cfg) {
  const Manifest m = read_manifest(cfg.manifest_path());
  const auto arch = cfg.arch();
  TensorCache cache(arch.input_h, arch.input_w);
  auto pre = [&](const DocumentRecord& r) -> const InputTensor& { return cache.get(r); };
  ThresholdTable table;
  std::optional<SiameseParams<float>> shared;
  if (!cfg.per_country_model) shared = load_checkpoint<float>(cfg.checkpoint_path(), arch);
  for (const auto& c : detail::countries_of(m, cfg.countries)) {
    std::vector<PairSample> pairs;
    try {
      pairs = sample_pairs(m, c, cfg.similar_pairs, cfg.dissimilar_pairs, cfg.calibration_split,
                           derive_seed(cfg.seed(), "calibration-pairs"), PairOptions{cfg.cross_source});
    } catch (const Error& e) {
      if (e.code() != ErrorCode::InsufficientDocuments) throw;
      cfg.note(c + ": skipped (" + e.what() + ")");
      continue;
    }
    const SiameseParams<float> params = shared ? *shared : load_checkpoint<float>(cfg.checkpoint_path(c), arch);
    const PairDistances d = compute_distances(params, pairs, pre);
    const DistanceStats stats = distance_stats(d.similar, d.dissimilar, c);
    table.entries.push_back(determine_threshold(stats, d.similar, d.dissimilar));
    std::string csv = "class,distance\n";
    for (double v : d.similar) csv += "similar," + detail::fmt_double(v) + "\n";
    for (double v : d.dissimilar) csv += "dissimilar," + detail::fmt_double(v) + "\n";
    std::filesystem::create_directories(cfg.out);
    detail::write_text(cfg.out / ("calibration_" + c + ".csv"), csv);
    cfg.note(c + ": lambda " + std::to_string(table.entries.back().lambda));
  }
  write_thresholds(table, cfg.out / "thresholds.json");
  write_run_record(cfg, "calibrate");
  return table;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

inline std::vector<CountryEvaluation> cmd_eval(const RunConfig& cfg) {
  const Manifest m = read_manifest(cfg.manifest_path());
  const auto arch = cfg.arch();
  const ThresholdTable table = cfg.lambda ? ThresholdTable{} : read_thresholds(cfg.thresholds_path());
  TensorCache cache(arch.input_h, arch.input_w);
  auto pre = [&](const DocumentRecord& r) -> const InputTensor& { return cache.get(r); };
  std::optional<SiameseParams<float>> shared;
  if (!cfg.per_country_model) shared = load_checkpoint<float>(cfg.checkpoint_path(), arch);

  std::vector<CountryEvaluation> evals;
  for (const auto& c : detail::countries_of(m, cfg.countries)) {
    double lambda = 0.0;
    if (cfg.lambda) {
      lambda = *cfg.lambda;
    } else {
      const ThresholdRecord* t = table.find(c);
      if (!t) fail(ErrorCode::UnknownCountry, "no calibrated threshold for '" + c + "'");
      lambda = t->lambda;
    }
    const auto pairs = sample_pairs(m, c, cfg.similar_pairs, cfg.dissimilar_pairs, Split::test,
                                    derive_seed(cfg.seed(), "eval-pairs"), PairOptions{cfg.cross_source});
    const SiameseParams<float> params = shared ? *shared : load_checkpoint<float>(cfg.checkpoint_path(c), arch);
    PairDistances d = compute_distances(params, pairs, pre);
    CountryEvaluation e;
    e.metrics = compute_metrics(d.similar, d.dissimilar, lambda, c);
    e.roc = roc_curve(d.similar, d.dissimilar);
    e.similar = std::move(d.similar);
    e.dissimilar = std::move(d.dissimilar);
    cfg.note(c + ": TAR " + std::to_string(e.metrics.tar) + " FAR " + std::to_string(e.metrics.far));
    evals.push_back(std::move(e));
  }
  export_report(evals, cfg.out);
  write_run_record(cfg, "eval");
  return evals;
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

struct VerifyResult {
  bool genuine = false;
  double distance = 0.0;
  double lambda = 0.0;
};

inline VerifyResult verify_pair(const SiameseParams<float>& params, const ThresholdRecord& threshold,
                                const std::filesystem::path& reference, const std::filesystem::path& query) {
  const auto& a = params.arch;
  auto load = [&](const std::filesystem::path& p) {
    return to_tensor(resize_bilinear(load_grayscale(p), a.input_w, a.input_h));
  };
  const FeatureVector fa = forward_branch(params, load(reference));
  const FeatureVector fb = forward_branch(params, load(query));
  VerifyResult r;
  r.distance = pair_distance(fa, fb);
  r.lambda = threshold.lambda;
  r.genuine = classify_pair(r.distance, r.lambda) == PairDecision::similar;
  return r;
}

inline VerifyResult cmd_verify(const RunConfig& cfg, const std::string& country,
                               const std::filesystem::path& reference, const std::filesystem::path& query) {
  const ThresholdTable table = read_thresholds(cfg.thresholds_path());
  const ThresholdRecord* t = table.find(country);
  if (!t) fail(ErrorCode::UnknownCountry, "no calibrated threshold for '" + country + "'");
  const auto params = load_checkpoint<float>(cfg.checkpoint_path(country), cfg.arch());
  return verify_pair(params, *t, reference, query);
}

}  // namespace gfv
