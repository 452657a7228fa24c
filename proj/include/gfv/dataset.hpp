#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfv/error.hpp"
#include "gfv/image_io.hpp"
#include "gfv/imaging.hpp"
#include "gfv/network.hpp"
#include "gfv/rng.hpp"

namespace gfv {

namespace fs = std::filesystem;

inline constexpr std::array<std::string_view, 10> kCountries{"alb", "aze", "esp", "est", "fin",
                                                             "grc", "iva", "rus", "srb", "svk"};

inline bool is_known_country(std::string_view code) {
  return std::find(kCountries.begin(), kCountries.end(), code) != kCountries.end();
}

enum class DocClass { genuine, forged };
enum class Source { template_image, scan };
enum class Split { train, test };

inline std::string_view to_string(DocClass c) { return c == DocClass::genuine ? "genuine" : "forged"; }
inline std::string_view to_string(Source s) { return s == Source::template_image ? "template" : "scan"; }
inline std::string_view to_string(Split s) { return s == Split::train ? "train" : "test"; }

// Directory names used in a corpus root for each source.
inline std::string_view source_dir(Source s) { return s == Source::template_image ? "templates" : "scans"; }

struct TamperStep {
  Region src;
  Region dst;
  int block_size = 0;

  friend bool operator==(const TamperStep&, const TamperStep&) = default;
};

struct DocumentRecord {
  std::string id;
  std::string country;
  DocClass doc_class = DocClass::genuine;
  Source source = Source::template_image;
  std::string image_path;
  std::optional<std::vector<TamperStep>> tamper_log;
  std::optional<Split> split;

  friend bool operator==(const DocumentRecord&, const DocumentRecord&) = default;
};

struct Manifest {
  std::vector<DocumentRecord> records;
  std::uint64_t created_with_seed = 0;

  void validate() const {
    std::set<std::string_view> ids;
    bool any_split = false, all_split = true;
    for (const auto& r : records) {
      if (!ids.insert(r.id).second) fail(ErrorCode::InvalidArgument, "duplicate record id " + r.id);
      const bool tampered = r.tamper_log.has_value() && !r.tamper_log->empty();
      if ((r.doc_class == DocClass::forged) != tampered) {
        fail(ErrorCode::InvalidArgument, "record " + r.id + ": forged class requires a non-empty tamper log");
      }
      any_split = any_split || r.split.has_value();
      all_split = all_split && r.split.has_value();
    }
    if (any_split && !all_split) fail(ErrorCode::InvalidArgument, "split tags must be set on every record or none");
  }

  const DocumentRecord* find(std::string_view id) const {
    for (const auto& r : records)
      if (r.id == id) return &r;
    return nullptr;
  }

  friend bool operator==(const Manifest&, const Manifest&) = default;
};

struct PairSample {
  DocumentRecord a;
  DocumentRecord b;
  int c = 0;  // 1 = same class
};

// ---------------------------------------------------------------------------
// Manifest serialisation: JSON lines, header first.
// ---------------------------------------------------------------------------

inline constexpr std::string_view kManifestFormat = "gfv-manifest/1";

namespace detail {

using ojson = nlohmann::ordered_json;

inline ojson region_json(const Region& r) { return ojson{{"x", r.x}, {"y", r.y}, {"w", r.w}, {"h", r.h}}; }

inline Region region_from(const nlohmann::json& j) {
  return Region{j.at("x").get<int>(), j.at("y").get<int>(), j.at("w").get<int>(), j.at("h").get<int>()};
}

inline ojson record_json(const DocumentRecord& r, const std::string& path) {
  ojson j;
  j["id"] = r.id;
  j["country"] = r.country;
  j["doc_class"] = std::string(to_string(r.doc_class));
  j["source"] = std::string(to_string(r.source));
  j["image_path"] = path;
  if (r.tamper_log) {
    ojson log = ojson::array();
    for (const auto& t : *r.tamper_log) {
      log.push_back(ojson{{"src", region_json(t.src)}, {"dst", region_json(t.dst)}, {"block_size", t.block_size}});
    }
    j["tamper_log"] = log;
  } else {
    j["tamper_log"] = nullptr;
  }
  j["split"] = r.split ? ojson(std::string(to_string(*r.split))) : ojson(nullptr);
  return j;
}

inline DocumentRecord record_from(const nlohmann::json& j) {
  DocumentRecord r;
  r.id = j.at("id").get<std::string>();
  r.country = j.at("country").get<std::string>();
  const auto cls = j.at("doc_class").get<std::string>();
  if (cls != "genuine" && cls != "forged") fail(ErrorCode::InvalidArgument, "bad doc_class " + cls);
  r.doc_class = cls == "genuine" ? DocClass::genuine : DocClass::forged;
  const auto src = j.at("source").get<std::string>();
  if (src != "template" && src != "scan") fail(ErrorCode::InvalidArgument, "bad source " + src);
  r.source = src == "template" ? Source::template_image : Source::scan;
  r.image_path = j.at("image_path").get<std::string>();
  if (j.contains("tamper_log") && !j["tamper_log"].is_null()) {
    std::vector<TamperStep> log;
    for (const auto& t : j["tamper_log"]) {
      log.push_back(TamperStep{region_from(t.at("src")), region_from(t.at("dst")), t.at("block_size").get<int>()});
    }
    r.tamper_log = std::move(log);
  }
  if (j.contains("split") && !j["split"].is_null()) {
    const auto s = j["split"].get<std::string>();
    if (s != "train" && s != "test") fail(ErrorCode::InvalidArgument, "bad split " + s);
    r.split = s == "train" ? Split::train : Split::test;
  }
  return r;
}

}  // namespace detail

/// `rebase` maps an in-memory image path to the string stored on disk.
template <typename Rebase>
std::string serialize_manifest(const Manifest& m, Rebase rebase) {
  std::ostringstream os;
  detail::ojson header;
  header["format"] = std::string(kManifestFormat);
  header["seed"] = m.created_with_seed;
  header["records"] = m.records.size();
  os << header.dump() << '\n';
  for (const auto& r : m.records) os << detail::record_json(r, rebase(r.image_path)).dump() << '\n';
  return os.str();
}

inline std::string serialize_manifest(const Manifest& m) {
  return serialize_manifest(m, [](const std::string& p) { return p; });
}

template <typename Resolve>
Manifest parse_manifest(std::string_view text, Resolve resolve) {
  Manifest m;
  std::istringstream is{std::string(text)};
  std::string line;
  bool header = false;
  try {
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (!header) {
        if (j.value("format", std::string()) != kManifestFormat) {
          fail(ErrorCode::InvalidArgument, "not a gfv manifest (missing format header)");
        }
        m.created_with_seed = j.at("seed").get<std::uint64_t>();
        header = true;
        continue;
      }
      DocumentRecord r = detail::record_from(j);
      r.image_path = resolve(r.image_path);
      m.records.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("malformed manifest: ") + e.what());
  }
  if (!header) fail(ErrorCode::InvalidArgument, "empty manifest");
  m.validate();
  return m;
}

inline Manifest parse_manifest(std::string_view text) {
  return parse_manifest(text, [](const std::string& p) { return p; });
}

/// Paths below the manifest's own directory are stored relative to it, so an
/// output directory can be moved or compared byte-for-byte with another run.
inline void write_manifest(const Manifest& m, const fs::path& path) {
  const fs::path base = fs::absolute(path).parent_path().lexically_normal();
  const auto rebase = [&](const std::string& p) {
    const fs::path abs = fs::absolute(p).lexically_normal();
    const fs::path rel = abs.lexically_relative(base);
    if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
    return abs.generic_string();
  };
  fs::create_directories(base);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << serialize_manifest(m, rebase);
  if (!out) fail(ErrorCode::IoError, "write failed: " + path.string());
}

inline Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::FileNotFound, path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const fs::path base = fs::absolute(path).parent_path();
  return parse_manifest(ss.str(), [&](const std::string& p) {
    const fs::path q(p);
    return (q.is_absolute() ? q : (base / q)).lexically_normal().string();
  });
}

// ---------------------------------------------------------------------------
// Corpus ingestion
// ---------------------------------------------------------------------------

struct IngestReport {
  std::vector<std::string> skipped;  // unknown directories, unreadable entries
};

/// Walks root/<country>/{templates,scans}/ and emits one genuine record per
/// raster, sorted by id.
inline Manifest ingest(const fs::path& root, IngestReport* report = nullptr) {
  if (!fs::is_directory(root)) fail(ErrorCode::FileNotFound, "corpus root " + root.string());
  Manifest m;
  std::vector<fs::path> countries;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) countries.push_back(e.path());
  }
  std::sort(countries.begin(), countries.end());
  for (const auto& dir : countries) {
    const std::string code = dir.filename().string();
    if (!is_known_country(code)) {
      if (report) report->skipped.push_back(std::string(to_string(ErrorCode::UnknownCountryDirectory)) + ": " + code);
      continue;
    }
    for (Source src : {Source::template_image, Source::scan}) {
      const fs::path sub = dir / source_dir(src);
      if (!fs::is_directory(sub)) continue;
      std::vector<fs::path> files;
      for (const auto& f : fs::directory_iterator(sub)) {
        if (f.is_regular_file() && is_supported_raster(f.path())) files.push_back(f.path());
      }
      std::sort(files.begin(), files.end());
      for (const auto& f : files) {
        DocumentRecord r;
        r.country = code;
        r.source = src;
        r.doc_class = DocClass::genuine;
        r.id = code + "/" + std::string(to_string(src)) + "/" + f.filename().string();
        r.image_path = f.lexically_normal().string();
        m.records.push_back(std::move(r));
      }
    }
  }
  if (m.records.empty()) fail(ErrorCode::EmptyCorpus, "no images under " + root.string());
  std::sort(m.records.begin(), m.records.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return m;
}

using Annotations = std::map<std::string, std::vector<Region>>;  // record id -> foreground

/// Reads root/<country>/annotations/<stem>.json (or <filename>.json) for
/// every record that has one.
inline Annotations load_annotations(const fs::path& root, const Manifest& m) {
  Annotations out;
  for (const auto& r : m.records) {
    const fs::path img(r.image_path);
    const fs::path dir = root / r.country / "annotations";
    for (const fs::path& candidate : {dir / (img.stem().string() + ".json"), dir / (img.filename().string() + ".json")}) {
      if (!fs::is_regular_file(candidate)) continue;
      std::ifstream in(candidate);
      try {
        const auto j = nlohmann::json::parse(in);
        std::vector<Region> regions;
        for (const auto& e : j) regions.push_back(detail::region_from(e));
        out[r.id] = std::move(regions);
      } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::InvalidArgument, "bad annotation file " + candidate.string() + ": " + e.what());
      }
      break;
    }
  }
  return out;
}

inline void write_annotations(const fs::path& path, const std::vector<Region>& regions) {
  detail::ojson j = detail::ojson::array();
  for (const auto& r : regions) j.push_back(detail::region_json(r));
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << j.dump() << '\n';
}

// ---------------------------------------------------------------------------
// Forged corpus generation
// ---------------------------------------------------------------------------

struct ForgeOptions {
  int block_size = 64;
  int zones_per_doc = 1;
  std::uint64_t seed = 42;
  fs::path out_dir;
};

struct ForgeEntry {
  std::string parent_id;
  std::string forged_id;  // empty when skipped
  int candidate_count = 0;
  int zones_applied = 0;
  bool used_annotations = false;
  std::string skip_reason;
};

struct ForgeReport {
  std::vector<ForgeEntry> entries;

  std::size_t skipped() const {
    return static_cast<std::size_t>(
        std::count_if(entries.begin(), entries.end(), [](const auto& e) { return e.forged_id.empty(); }));
  }
};

inline std::string forged_id_for(const DocumentRecord& parent) {
  const fs::path f(parent.id);
  return parent.country + "/" + std::string(to_string(parent.source)) + "/" + f.stem().string() + "_f.png";
}

inline fs::path forged_path_for(const DocumentRecord& parent, const fs::path& out_dir) {
  const fs::path f(parent.image_path);
  return out_dir / parent.country / "forged" / source_dir(parent.source) / (f.stem().string() + "_f.png");
}

/// Chooses the (src, dst) block pairs for one document. Blocks are drawn
/// without replacement, so destinations are pairwise disjoint and no source
/// is ever overwritten by an earlier move.
inline std::vector<TamperStep> draw_tamper_steps(const BlockGrid& grid, std::vector<int> candidates, int zones,
                                                 Rng& rng) {
  const int usable = std::min<int>(zones, static_cast<int>(candidates.size()) / 2);
  std::vector<TamperStep> steps;
  for (int z = 0; z < 2 * usable; ++z) {
    const auto pick = z + static_cast<std::size_t>(rng.below(candidates.size() - static_cast<std::size_t>(z)));
    std::swap(candidates[static_cast<std::size_t>(z)], candidates[pick]);
  }
  for (int z = 0; z < usable; ++z) {
    const Region& dst = grid.block(candidates[static_cast<std::size_t>(z)]);
    const Region& src = grid.block(candidates[static_cast<std::size_t>(usable + z)]);
    steps.push_back(TamperStep{src, dst, grid.block_size});
  }
  return steps;
}

inline GrayImage apply_tamper_log(GrayImage img, const std::vector<TamperStep>& steps) {
  for (const auto& s : steps) img = copy_move(img, s.src, s.dst);
  return img;
}

struct ForgeResult {
  Manifest manifest;
  ForgeReport report;
};

/// For every genuine record: partition, pick candidate blocks (annotations
/// when present, the foreground heuristic otherwise), copy-move, and write
/// the forged PNG. Each document draws from its own (seed, id) stream.
inline ForgeResult generate_forged_set(const Manifest& genuine, const ForgeOptions& opt,
                                       const Annotations& annotations = {}) {
  if (opt.zones_per_doc < 1) fail(ErrorCode::InvalidArgument, "zones_per_doc must be >= 1");
  for (const auto& r : genuine.records) {
    if (r.doc_class != DocClass::genuine) fail(ErrorCode::InvalidArgument, "input manifest must be genuine-only");
  }
  ForgeResult result;
  result.manifest.created_with_seed = opt.seed;
  result.manifest.records = genuine.records;
  std::vector<DocumentRecord> forged;
  for (const auto& parent : genuine.records) {
    ForgeEntry entry;
    entry.parent_id = parent.id;
    const GrayImage img = load_grayscale(parent.image_path);
    if (opt.block_size < 1 || opt.block_size > std::min(img.width(), img.height())) {
      entry.skip_reason = std::string(to_string(ErrorCode::InvalidBlockSize));
      result.report.entries.push_back(entry);
      continue;
    }
    const BlockGrid grid = partition_blocks(img, opt.block_size);
    std::vector<Region> foreground;
    if (auto it = annotations.find(parent.id); it != annotations.end()) {
      foreground = it->second;
      entry.used_annotations = true;
    } else {
      foreground = detect_foreground_blocks(img, grid);
    }
    const std::vector<int> candidates = select_candidate_zones(img, grid, foreground);
    entry.candidate_count = static_cast<int>(candidates.size());
    if (candidates.size() < 2) {
      entry.skip_reason = std::string(to_string(ErrorCode::NoCandidateZones));
      result.report.entries.push_back(entry);
      continue;
    }
    Rng rng(derive_seed(opt.seed, parent.id));
    const auto steps = draw_tamper_steps(grid, candidates, opt.zones_per_doc, rng);
    const GrayImage tampered = apply_tamper_log(img, steps);
    const fs::path out = forged_path_for(parent, opt.out_dir);
    save_png(tampered, out);

    DocumentRecord r;
    r.id = forged_id_for(parent);
    r.country = parent.country;
    r.source = parent.source;
    r.doc_class = DocClass::forged;
    r.image_path = out.lexically_normal().string();
    r.tamper_log = steps;
    entry.forged_id = r.id;
    entry.zones_applied = static_cast<int>(steps.size());
    forged.push_back(std::move(r));
    result.report.entries.push_back(entry);
  }
  for (auto& r : forged) result.manifest.records.push_back(std::move(r));
  result.manifest.validate();
  return result;
}

// ---------------------------------------------------------------------------
// Train / test split
// ---------------------------------------------------------------------------

/// Stratified by (country, class). The overall train count is
/// round(total * fraction), apportioned to strata by largest remainder, and
/// every stratum keeps at least one record on each side.
inline Manifest split(const Manifest& m, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    fail(ErrorCode::InvalidArgument, "train fraction must lie strictly between 0 and 1");
  }
  std::map<std::string, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    strata[r.country + "/" + std::string(to_string(r.doc_class))].push_back(i);
  }
  struct Quota {
    std::string key;
    std::size_t size = 0;
    std::size_t train = 0;
    double remainder = 0.0;
  };
  std::vector<Quota> quotas;
  std::size_t total = 0, assigned = 0;
  for (const auto& [key, members] : strata) {
    if (members.size() < 2) {
      fail(ErrorCode::StratumTooSmall, "stratum " + key + " has " + std::to_string(members.size()) + " record(s)");
    }
    const double exact = static_cast<double>(members.size()) * train_fraction;
    Quota q{key, members.size(), static_cast<std::size_t>(std::floor(exact)), exact - std::floor(exact)};
    total += q.size;
    assigned += q.train;
    quotas.push_back(q);
  }
  const auto target = static_cast<std::size_t>(std::llround(static_cast<double>(total) * train_fraction));
  std::vector<std::size_t> order(quotas.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return quotas[a].remainder > quotas[b].remainder; });
  for (std::size_t k = 0; assigned < target && k < order.size(); ++k) {
    auto& q = quotas[order[k]];
    if (q.remainder > 0.0) {
      ++q.train;
      ++assigned;
    }
  }
  for (auto& q : quotas) q.train = std::clamp<std::size_t>(q.train, 1, q.size - 1);

  Manifest out = m;
  for (const auto& q : quotas) {
    std::vector<std::size_t> members = strata[q.key];
    std::sort(members.begin(), members.end(),
              [&](std::size_t a, std::size_t b) { return m.records[a].id < m.records[b].id; });
    Rng rng(derive_seed(seed, "split/" + q.key));
    rng.shuffle(members);
    for (std::size_t k = 0; k < members.size(); ++k) {
      out.records[members[k]].split = k < q.train ? Split::train : Split::test;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pair sampling
// ---------------------------------------------------------------------------

struct PairOptions {
  bool allow_cross_source = false;
};

/// Similar pairs alternate genuine/genuine and forged/forged, starting with
/// genuine; dissimilar pairs are (genuine, forged). Within a pair the two
/// documents differ; across pairs documents are drawn with replacement.
inline std::vector<PairSample> sample_pairs(const Manifest& m, std::string_view country, int n_similar,
                                            int n_dissimilar, std::optional<Split> split_tag, std::uint64_t seed,
                                            PairOptions opt = {}) {
  if (n_similar < 0 || n_dissimilar < 0) fail(ErrorCode::InvalidArgument, "pair counts must be non-negative");
  std::vector<const DocumentRecord*> docs;
  for (const auto& r : m.records) {
    if (r.country != country) continue;
    if (split_tag && r.split != split_tag) continue;
    docs.push_back(&r);
  }
  std::sort(docs.begin(), docs.end(), [](const auto* a, const auto* b) { return a->id < b->id; });

  auto group_key = [&](const DocumentRecord& r) { return opt.allow_cross_source ? 0 : static_cast<int>(r.source); };
  // members[class][group]
  std::map<int, std::vector<const DocumentRecord*>> by_group[2];
  for (const auto* d : docs) by_group[static_cast<int>(d->doc_class)][group_key(*d)].push_back(d);

  const std::string where = std::string(country) + (split_tag ? "/" + std::string(to_string(*split_tag)) : "");
  std::vector<const DocumentRecord*> similar_pool[2];
  for (int cls = 0; cls < 2; ++cls) {
    for (const auto& [g, members] : by_group[cls])
      if (members.size() >= 2) similar_pool[cls].insert(similar_pool[cls].end(), members.begin(), members.end());
    std::sort(similar_pool[cls].begin(), similar_pool[cls].end(), [](auto* a, auto* b) { return a->id < b->id; });
  }
  std::vector<const DocumentRecord*> dissimilar_pool;
  for (const auto* d : docs) {
    if (d->doc_class == DocClass::genuine && by_group[1].count(group_key(*d))) dissimilar_pool.push_back(d);
  }

  const int genuine_similar = (n_similar + 1) / 2, forged_similar = n_similar / 2;
  if ((genuine_similar > 0 && similar_pool[0].empty()) || (forged_similar > 0 && similar_pool[1].empty()) ||
      (n_dissimilar > 0 && dissimilar_pool.empty())) {
    fail(ErrorCode::InsufficientDocuments, "not enough documents of each class in " + where);
  }

  Rng rng(derive_seed(seed, "pairs/" + where));
  std::vector<PairSample> out;
  out.reserve(static_cast<std::size_t>(n_similar + n_dissimilar));
  for (int i = 0; i < n_similar; ++i) {
    const int cls = i % 2;
    const auto& pool = similar_pool[cls];
    const DocumentRecord* a = pool[rng.below(pool.size())];
    const auto& group = by_group[cls].at(group_key(*a));
    std::vector<const DocumentRecord*> others;
    for (const auto* d : group)
      if (d != a) others.push_back(d);
    const DocumentRecord* b = others[rng.below(others.size())];
    out.push_back(PairSample{*a, *b, 1});
  }
  for (int i = 0; i < n_dissimilar; ++i) {
    const DocumentRecord* a = dissimilar_pool[rng.below(dissimilar_pool.size())];
    const auto& forged = by_group[1].at(group_key(*a));
    const DocumentRecord* b = forged[rng.below(forged.size())];
    out.push_back(PairSample{*a, *b, 0});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Network input
// ---------------------------------------------------------------------------

inline InputTensor to_tensor(const GrayImage& img) {
  InputTensor t;
  t.channels = 1;
  t.height = img.height();
  t.width = img.width();
  t.values.assign(img.pixels().begin(), img.pixels().end());
  return t;
}

/// load_grayscale -> resize_bilinear -> 1 x H x W tensor.
inline InputTensor preprocess(const DocumentRecord& record, int target_h, int target_w) {
  return to_tensor(resize_bilinear(load_grayscale(record.image_path), target_w, target_h));
}

/// Memoises preprocessed tensors by record id.
class TensorCache {
 public:
  TensorCache(int target_h, int target_w) : h_(target_h), w_(target_w) {}

  const InputTensor& get(const DocumentRecord& r) {
    auto it = cache_.find(r.id);
    if (it == cache_.end()) it = cache_.emplace(r.id, preprocess(r, h_, w_)).first;
    return it->second;
  }

 private:
  int h_, w_;
  std::map<std::string, InputTensor> cache_;
};

}  // namespace gfv
