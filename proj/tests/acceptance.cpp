// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Criterion 1 needs the MIDV-2020 assets and only runs when
// GFV_MIDV2020_ROOT points at them.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <sstream>
#include <set>
#include <string>
#include <vector>

#include "gfv/gfv.hpp"
#include "gfv/pipeline.hpp"
#include "gfv/synthetic.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace gfv;
namespace fs = std::filesystem;

namespace {

enum class Outcome { pass, fail, skipped };

struct Verdict {
  Outcome outcome = Outcome::fail;
  std::string detail;
};

Verdict pass(std::string d) { return {Outcome::pass, std::move(d)}; }
Verdict fail_with(std::string d) { return {Outcome::fail, std::move(d)}; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Every regular file under dir except run.json, keyed by relative path.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().filename() == "run.json") continue;
    out[fs::relative(e.path(), dir).generic_string()] = test::slurp(e.path());
  }
  return out;
}

std::string metrics_line(const std::vector<CountryEvaluation>& evals) {
  std::string s;
  for (const auto& e : evals)
    s += fmt(" %s:TAR=%.3f,FAR=%.3f,lambda=%.3f", e.metrics.country.c_str(), e.metrics.tar, e.metrics.far,
             e.metrics.lambda);
  return s;
}

// 1 -------------------------------------------------------------------------
Verdict midv_reproduction() {
  const char* root = std::getenv("GFV_MIDV2020_ROOT");
  if (!root || !*root) return {Outcome::skipped, "optional; set GFV_MIDV2020_ROOT to the MIDV-2020 corpus to run it"};
  test::TempDir dir;
  RunConfig cfg;
  cfg.root = root;
  cfg.out = dir.path();
  cmd_forge(cfg);
  cfg.root = dir.path();
  cmd_train(cfg);
  cmd_calibrate(cfg);
  const auto evals = cmd_eval(cfg);
  bool ok = evals.size() == 10;
  for (const auto& e : evals) ok = ok && e.metrics.tar >= 0.92 && e.metrics.far <= 0.08;
  return {ok ? Outcome::pass : Outcome::fail, fmt("%zu countries;", evals.size()) + metrics_line(evals)};
}

// 2 -------------------------------------------------------------------------
Verdict desk_end_to_end() {
  const auto t0 = std::chrono::steady_clock::now();
  test::TempDir dir;
  SyntheticCorpusSpec spec;  // 3 countries x 20 documents, 256 x 256
  make_synthetic_corpus(dir.path() / "corpus", spec);

  RunConfig cfg;
  cfg.root = dir.path() / "corpus";
  cfg.out = dir.path() / "run";
  cfg.block_size = 32;
  cfg.resolution = 64;
  cfg.train.epochs = 30;
  cfg.train.batch_size = 4;
  cfg.train.learning_rate = 5e-5;
  cfg.train.seed = 42;
  const ForgeSummary forged = cmd_forge(cfg);
  cfg.root = cfg.out;
  cmd_train(cfg);
  cmd_calibrate(cfg);
  const auto evals = cmd_eval(cfg);
  const double elapsed = seconds_since(t0);

  // For reference only: thresholds calibrated on held-out pairs instead.
  RunConfig held_out = cfg;
  held_out.out = dir.path() / "held_out";
  held_out.checkpoint = cfg.root / "model.ckpt";
  held_out.thresholds = held_out.out / "thresholds.json";
  held_out.calibration_split = Split::test;
  cmd_calibrate(held_out);
  const auto alt = cmd_eval(held_out);

  bool ok = evals.size() == 3 && elapsed < 15 * 60;
  for (const auto& e : evals) ok = ok && e.metrics.tar >= 0.90 && e.metrics.far <= 0.10;

  // One verification through the decision path: a held-out genuine document
  // against its own forged copy.
  std::string verify = " verify:n/a";
  const auto& recs = forged.manifest.records;
  auto find = [&](const std::string& id) {
    return std::find_if(recs.begin(), recs.end(), [&](const DocumentRecord& r) { return r.id == id; });
  };
  for (const auto& entry : forged.report.entries) {
    const auto f = find(entry.forged_id), g = find(entry.parent_id);
    if (entry.forged_id.empty() || f == recs.end() || g == recs.end() || f->split != Split::test) continue;
    const auto& r = *f;
    const VerifyResult v = cmd_verify(cfg, r.country, g->image_path, r.image_path);
    verify = fmt(" verify(%s):%s d=%.3f", r.country.c_str(), v.genuine ? "GENUINE" : "FORGED", v.distance);
    break;
  }
  return {ok ? Outcome::pass : Outcome::fail,
          fmt("%.0fs;", elapsed) + metrics_line(evals) + verify + "; held-out calibration (not judged):" +
              metrics_line(alt)};
}

// 3 -------------------------------------------------------------------------
Verdict loss_identities() {
  struct Case {
    double d;
    int c;
    double m, want;
  };
  const std::vector<Case> cases{{0.0, 1, 2.0, 0.0}, {2.0, 0, 2.0, 0.0}, {3.7, 0, 2.0, 0.0},
                                {1.5, 1, 2.0, 2.25}, {0.5, 0, 2.0, 2.25}};
  double worst = 0.0;
  for (const auto& k : cases) worst = std::max(worst, std::abs(contrastive_loss(k.d, k.c, k.m) - k.want));
  return {worst <= 1e-12 ? Outcome::pass : Outcome::fail, fmt("max deviation %.3g over %zu identities", worst, cases.size())};
}

// 4 -------------------------------------------------------------------------
Verdict gradient_check_sweep() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(derive_seed(42, "acceptance/gradcheck"));
  double worst = 0.0;
  std::string worst_where;
  std::size_t checked = 0, skipped = 0;
  for (int cfg_index = 0; cfg_index < 20; ++cfg_index) {
    ArchitectureConfig a = ArchitectureConfig::with_resolution(16);
    a.fc_widths = {16, 16, 5};
    a.activation = cfg_index % 4 == 3 ? Activation::tanh : Activation::relu;
    a.order = cfg_index % 5 == 4 ? BlockOrder::norm_then_activation : BlockOrder::activation_then_norm;
    const auto params = init_params<double>(a, rng.next_u64());
    const int c = cfg_index % 2;
    InputTensor xa, xb;
    xa.height = xa.width = xb.height = xb.width = 16;
    for (int i = 0; i < 256; ++i) {
      xa.values.push_back(rng.uniform());
      xb.values.push_back(rng.uniform());
    }
    // Distance under the probe; the singular points d = 0 and d = m are avoided.
    Workspace<double> ws;
    forward_batch<double>(params, stack_inputs<double>(a, {&xa, &xb}), 2, Mode::train, ws);
    const double d = pair_distance(ws.embedding(0), ws.embedding(1));
    if (d < 1e-6) return fail_with("degenerate configuration " + std::to_string(cfg_index));
    const double margin = c == 1 ? rng.uniform(0.5, 3.0) : d * rng.uniform(1.5, 3.0);
    const GradientCheckResult r = gradient_check(params, xa, xb, c, margin);
    checked += r.checked;
    skipped += r.skipped;
    if (r.max_relative_error > worst) {
      worst = r.max_relative_error;
      worst_where = fmt("config %d %s, analytic %.3g vs numeric %.3g", cfg_index, r.worst_parameter.c_str(),
                        r.worst_analytic, r.worst_numeric);
    }
  }
  const double elapsed = seconds_since(t0);
  const bool ok = worst < 1e-4 && elapsed < 120.0;
  return {ok ? Outcome::pass : Outcome::fail,
          fmt("max rel error %.3g (%s), %zu params checked, %zu skipped at kinks, %.1fs", worst, worst_where.c_str(),
              checked, skipped, elapsed)};
}

// 5 -------------------------------------------------------------------------
Verdict copy_move_invariant() {
  Rng rng(derive_seed(42, "acceptance/copy-move"));
  int done = 0;
  while (done < 100) {
    const int w = 4 + static_cast<int>(rng.below(60)), h = 4 + static_cast<int>(rng.below(60));
    std::vector<double> px(static_cast<std::size_t>(w * h));
    for (auto& v : px) v = rng.uniform();
    const GrayImage img(w, h, px);
    const int rw = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(w))),
              rh = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(h)));
    const Region src{static_cast<int>(rng.below(static_cast<std::uint64_t>(w - rw + 1))),
                     static_cast<int>(rng.below(static_cast<std::uint64_t>(h - rh + 1))), rw, rh};
    const Region dst{static_cast<int>(rng.below(static_cast<std::uint64_t>(w - rw + 1))),
                     static_cast<int>(rng.below(static_cast<std::uint64_t>(h - rh + 1))), rw, rh};
    if (src.x == dst.x && src.y == dst.y) continue;
    const GrayImage out = copy_move(img, src, dst);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const bool inside = x >= dst.x && x < dst.x + rw && y >= dst.y && y < dst.y + rh;
        const double want = inside ? img.at(src.x + x - dst.x, src.y + y - dst.y) : img.at(x, y);
        if (out.at(x, y) != want) return fail_with(fmt("triple %d differs at (%d,%d)", done, x, y));
      }
    }
    ++done;
  }
  return pass("100 triples pixel-exact");
}

// 6 -------------------------------------------------------------------------
Verdict table_one_shapes() {
  const ArchitectureConfig a = ArchitectureConfig::with_resolution(300);
  const ParamLayout L = ParamLayout::build(a);
  const std::vector<int> maps{4, 8, 8};
  bool ok = L.conv.size() == 3 && L.fc.size() == 3 && a.flatten_width() == 720000;
  for (std::size_t i = 0; ok && i < 3; ++i) {
    ok = L.conv[i].out_maps == maps[i] && L.conv[i].out_h == 300 && L.conv[i].out_w == 300 &&
         L.conv[i].in_maps == (i == 0 ? 1 : maps[i - 1]);
  }
  const std::vector<int> widths{500, 500, 5};
  for (std::size_t i = 0; ok && i < 3; ++i) ok = L.fc[i].out == widths[i];
  ok = ok && L.fc[0].in == 720000;
  for (const auto& s : a.layer_shapes()) {
    if (s.name.starts_with("conv") || s.name.starts_with("relu") || s.name.starts_with("batchnorm")) {
      if (s.name.starts_with("relu_fc")) continue;
      ok = ok && s.dims.size() == 3 && s.dims[1] == 300 && s.dims[2] == 300;
    }
  }
  return {ok ? Outcome::pass : Outcome::fail,
          fmt("conv 4/8/8 at 300x300, flatten %zu, fc %d/%d/%d, %zu trainable values", a.flatten_width(), L.fc[0].out,
              L.fc[1].out, L.fc[2].out, L.trainable)};
}

// 7 -------------------------------------------------------------------------
Verdict calibration_oracle() {
  Rng rng(derive_seed(42, "acceptance/calibration"));
  int overlapping = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = oracle::random_distances(rng, 40);
    const auto t = determine_threshold(distance_stats(s.sim, s.dis, "xx"), s.sim, s.dis);
    overlapping += t.overlap ? 1 : 0;
    const long best = oracle::midpoints(s.sim, s.dis).empty() ? oracle::correct(s.sim, s.dis, t.lambda)
                                                              : oracle::best_correct(s.sim, s.dis);
    const double want = static_cast<double>(best) / static_cast<double>(s.sim.size() + s.dis.size());
    if (t.calibration_accuracy != want || oracle::correct(s.sim, s.dis, t.lambda) != best) {
      return fail_with(fmt("set %d: accuracy %.17g, brute force %.17g", trial, t.calibration_accuracy, want));
    }
  }
  return pass(fmt("50 sets exact (%d overlapping)", overlapping));
}

// 8 -------------------------------------------------------------------------
Verdict metrics_oracle() {
  Rng rng(derive_seed(42, "acceptance/metrics"));
  std::size_t roc_points = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = oracle::random_distances(rng, 40);
    const double lambda = rng.uniform(0.0, 2.5);
    const auto m = compute_metrics(s.sim, s.dis, lambda);
    const auto c = oracle::count_accepts(s.sim, s.dis, lambda);
    const double X1 = static_cast<double>(s.sim.size()), X2 = static_cast<double>(s.dis.size());
    if (m.x1 != c.accepted_sim || m.x3 != c.accepted_dis || m.tar != c.accepted_sim / X1 ||
        m.far != c.accepted_dis / X2 || std::abs(m.tar + m.frr - 1.0) > 1e-12) {
      return fail_with(fmt("instance %d disagrees with counting", trial));
    }
    const auto roc = roc_curve(s.sim, s.dis);
    for (std::size_t i = 0; i < roc.size(); ++i) {
      const auto k = oracle::count_accepts(s.sim, s.dis, roc[i].lambda);
      if (roc[i].tar != k.accepted_sim / X1 || roc[i].far != k.accepted_dis / X2) {
        return fail_with(fmt("instance %d: roc point %zu differs", trial, i));
      }
      if (i > 0 && (roc[i].tar < roc[i - 1].tar || roc[i].far < roc[i - 1].far)) {
        return fail_with(fmt("instance %d: roc not monotone at %zu", trial, i));
      }
    }
    roc_points += roc.size();
  }
  return pass(fmt("50 instances exact, %zu ROC points checked", roc_points));
}

// 9 -------------------------------------------------------------------------
Verdict table_two_containment() {
  struct Row {
    const char* country;
    double sim_max, dis_min, dis_max, lo, hi;
  };
  const std::vector<Row> rows{{"aze", 0.73, 1.20, 2.45, 0.75, 1.15}, {"fin", 0.42, 1.82, 2.18, 0.48, 1.75},
                              {"grc", 0.65, 1.26, 2.53, 0.65, 1.20}, {"iva", 0.89, 1.37, 2.56, 0.90, 1.30},
                              {"srb", 1.02, 1.55, 2.92, 1.05, 1.50}, {"svk", 1.03, 1.22, 2.61, 1.05, 1.20}};
  std::string detail;
  bool ok = true;
  for (const auto& r : rows) {
    const std::vector<double> sim{0.0, r.sim_max}, dis{r.dis_min, r.dis_max};
    const auto t = determine_threshold(distance_stats(sim, dis, r.country), sim, dis);
    ok = ok && !t.overlap && t.range_lo <= r.lo && t.range_hi >= r.hi;
    detail += fmt(" %s[%.2f,%.2f]", r.country, t.range_lo, t.range_hi);
  }
  return {ok ? Outcome::pass : Outcome::fail, "ranges" + detail};
}

// 10 ------------------------------------------------------------------------
Verdict determinism() {
  test::TempDir dir;
  SyntheticCorpusSpec spec;
  spec.docs_per_country = 6;
  spec.size = 128;
  make_synthetic_corpus(dir.path() / "corpus", spec);
  std::vector<std::map<std::string, std::string>> forge, train, calib;
  for (int run = 0; run < 2; ++run) {
    const fs::path out = dir.path() / ("run" + std::to_string(run));
    RunConfig cfg;
    cfg.root = dir.path() / "corpus";
    cfg.out = out / "forge";
    cfg.block_size = 16;
    cfg.resolution = 16;
    cfg.similar_pairs = cfg.dissimilar_pairs = 8;
    cfg.train.epochs = 3;
    cfg.train.learning_rate = 1e-3;
    cmd_forge(cfg);
    forge.push_back(snapshot(cfg.out));
    cfg.root = cfg.out;
    cfg.out = out / "train";
    cmd_train(cfg);
    train.push_back(snapshot(cfg.out));
    cfg.checkpoint = cfg.out / "model.ckpt";
    cfg.out = out / "calibrate";
    cmd_calibrate(cfg);
    calib.push_back(snapshot(cfg.out));
  }
  const bool ok = forge[0] == forge[1] && train[0] == train[1] && calib[0] == calib[1];
  return {ok ? Outcome::pass : Outcome::fail,
          fmt("forge %s (%zu files), train %s (%zu files), calibrate %s (%zu files)",
              forge[0] == forge[1] ? "identical" : "DIFFERS", forge[0].size(),
              train[0] == train[1] ? "identical" : "DIFFERS", train[0].size(),
              calib[0] == calib[1] ? "identical" : "DIFFERS", calib[0].size())};
}

}  // namespace

// Optional arguments pick criteria by number, e.g. `acceptance 4 10`.
int main(int argc, char** argv) {
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::atoi(argv[i])));
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"MIDV-2020 reproduction", midv_reproduction},
      {"desk-scale end-to-end", desk_end_to_end},
      {"contrastive loss identities", loss_identities},
      {"gradient check", gradient_check_sweep},
      {"copy-move invariant", copy_move_invariant},
      {"layer shapes at 300x300", table_one_shapes},
      {"calibration oracle", calibration_oracle},
      {"metrics oracle", metrics_oracle},
      {"separated-country threshold ranges", table_two_containment},
      {"determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.contains(i + 1)) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = fail_with(std::string("exception: ") + e.what());
    }
    const char* tag = v.outcome == Outcome::pass ? "PASS" : v.outcome == Outcome::fail ? "FAIL" : "SKIPPED";
    std::printf("criterion %2zu %-7s %s: %s\n", i + 1, tag, criteria[i].first.c_str(), v.detail.c_str());
    std::fflush(stdout);
    failures += v.outcome == Outcome::fail ? 1 : 0;
  }
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
