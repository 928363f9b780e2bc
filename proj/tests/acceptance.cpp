// Acceptance checks: one PASS/FAIL line per criterion. Exit status is nonzero
// when any criterion fails. Optional criteria whose inputs are not provisioned
// print SKIP.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "k4/experiment.hpp"
#include "k4/synthetic.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace k4;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  enum class Status { kPass, kFail, kSkip } status = Status::kPass;
  std::string detail;
};

Outcome pass(std::string d) { return {Outcome::Status::kPass, std::move(d)}; }
Outcome fail(std::string d) { return {Outcome::Status::kFail, std::move(d)}; }
Outcome skip(std::string d) { return {Outcome::Status::kSkip, std::move(d)}; }
Outcome verdict(bool ok, std::string d) { return ok ? pass(std::move(d)) : fail(std::move(d)); }

double seconds(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("k4_acceptance_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// ---------------------------------------------------------------------------

Outcome prdc_oracle() {
  const auto t0 = Clock::now();
  Rng rng(20240601);
  const std::size_t dims[] = {4, 8, 64};
  const std::size_t ks[] = {1, 3, 5};
  std::size_t mismatches = 0;
  for (int i = 0; i < 50; ++i) {
    const std::size_t n = 50 + rng.below(451), m = 50 + rng.below(451);
    const std::size_t d = dims[rng.below(3)], k = ks[rng.below(3)];
    const auto ref = oracle::random_matrix(rng, n, d);
    const auto query = oracle::random_matrix(rng, m, d);
    if (!(compute_prdc(ref, query, k).values == oracle::prdc(ref, query, k))) ++mismatches;
  }
  const double s = seconds(t0);
  return verdict(mismatches == 0 && s < 30.0, fmt("50 instances, %zu mismatches, %.2f s (limit 30 s)", mismatches, s));
}

Outcome prdc_hand_case() {
  const auto ref = Matrix::from_rows({{0, 0}, {2, 0}, {0, 2}});
  const auto query = Matrix::from_rows({{1, 0}, {10, 10}});
  const auto v = compute_prdc(ref, query, 1).values;
  const double expected[2][4] = {{1, 1, 0.6667, 1}, {0, 0.6667, 0, 1}};
  double worst = 0.0;
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t c = 0; c < 4; ++c) worst = std::max(worst, std::abs(v(j, c) - expected[j][c]));
  return verdict(worst <= 1e-4, fmt("rows [%g,%g,%g,%g] [%g,%g,%g,%g], max deviation %.2e", v(0, 0), v(0, 1), v(0, 2),
                                    v(0, 3), v(1, 0), v(1, 1), v(1, 2), v(1, 3), worst));
}

Outcome prdc_scaling() {
  Rng rng(77);
  std::size_t differing = 0, total = 0;
  for (int i = 0; i < 20; ++i) {
    const std::size_t n = 20 + rng.below(181), m = 20 + rng.below(181);
    const std::size_t d = 2 + rng.below(31), k = 1 + rng.below(5);
    const auto ref = oracle::random_matrix(rng, n, d);
    const auto query = oracle::random_matrix(rng, m, d);
    const auto base = compute_prdc(ref, query, k).values;
    for (double c : {1e-3, 7.0, 1e3}) {
      Matrix r2 = ref, q2 = query;
      for (auto& x : r2.data()) x *= c;
      for (auto& x : q2.data()) x *= c;
      differing += !(compute_prdc(r2, q2, k).values == base);
      ++total;
    }
  }
  return verdict(differing == 0, fmt("%zu of %zu scaled instances differ bitwise", differing, total));
}

Outcome metric_oracles() {
  using V = std::vector<double>;
  using L = std::vector<int>;
  std::vector<std::string> problems;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) problems.push_back(what);
  };
  // Worked examples.
  expect(auroc(V{0.4, 0.8, 0.2, 0.6}, L{1, 1, 0, 0}) == 0.75, "auroc 0.75 case");
  expect(auroc(V{0.9, 0.8, 0.1, 0.2}, L{1, 1, 0, 0}) == 1.0, "auroc separated");
  expect(auroc(V{0.5, 0.5, 0.5, 0.5}, L{1, 0, 1, 0}) == 0.5, "auroc all ties");
  expect(auprc(V{0.9, 0.1, 0.2}, L{1, 0, 0}) == 1.0, "auprc single positive first");
  const L y8{1, 1, 1, 1, 0, 0, 0, 0};
  expect(fpr_at_tpr(V{0.9, 0.8, 0.7, 0.65, 0.6, 0.5, 0.4, 0.3}, y8, 0.95) == 0.0, "fpr 0.0 case");
  expect(fpr_at_tpr(V{0.9, 0.8, 0.7, 0.1, 0.6, 0.5, 0.4, 0.3}, y8, 0.95) == 1.0, "fpr 1.0 case");
  const auto f = best_f1(V{0.9, 0.2, 0.1}, L{1, 1, 0});
  expect(f.f1 == 1.0 && f.threshold == 0.2, "f1 1.0 case");
  const auto eq = best_f1(V{0.3, 0.3, 0.3, 0.3}, L{1, 0, 1, 0});
  expect(std::abs(eq.f1 - 2.0 / 3.0) < 1e-15 && eq.recall == 1.0, "f1 all-equal case");

  // Random instances against the all-pairs and exhaustive-threshold oracles.
  Rng rng(4242);
  std::size_t auroc_bad = 0, fpr_bad = 0, f1_bad = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 2 + rng.below(1999);
    const bool coarse = i % 2 == 0;  // half the instances carry heavy ties
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = rng.uniform() < 0.3 ? 1 : 0;
      s[j] = coarse ? static_cast<double>(rng.below(20)) : rng.normal() + 0.8 * y[j];
    }
    y[0] = 1;
    y[1] = 0;
    auroc_bad += auroc(s, y) != oracle::auroc_pairs(s, y);
    if (n <= 600) {
      fpr_bad += fpr_at_tpr(s, y, 0.95) != oracle::fpr_at_tpr(s, y, 0.95);
      const auto a = best_f1(s, y);
      const auto b = oracle::best_f1(s, y);
      f1_bad += !(a.f1 == b.f1 && a.precision == b.precision && a.threshold == b.threshold);
    }
  }
  expect(auroc_bad == 0, fmt("%zu auroc oracle mismatches", auroc_bad));
  expect(fpr_bad == 0, fmt("%zu fpr_at_tpr oracle mismatches", fpr_bad));
  expect(f1_bad == 0, fmt("%zu best_f1 oracle mismatches", f1_bad));
  std::string d = "100 random AUROC instances (n <= 2000), exhaustive FPR/F1, worked examples";
  for (const auto& p : problems) d += "; " + p;
  return verdict(problems.empty(), d);
}

Outcome chunk_counts() {
  const fs::path dir = scratch_dir("chunks");
  std::string problems;
  const std::pair<std::size_t, std::size_t> cases[] = {{11'200'000, 12}, {4'750'000, 5}, {2'500'000, 3}};
  for (auto [lines, expected] : cases) {
    const fs::path path = dir / "stream.log";
    {
      std::ofstream f(path, std::ios::binary);
      const std::string line = "0 m\n";
      std::string block;
      for (int i = 0; i < 100'000; ++i) block += line;
      for (std::size_t i = 0; i < lines / 100'000; ++i) f << block;
      for (std::size_t i = 0; i < lines % 100'000; ++i) f << line;
    }
    ChunkReader reader(path, LogFormat::kGeneric, 1'000'000);
    Chunk c;
    std::size_t n = 0, total = 0;
    while (reader.next(c)) {
      ++n;
      total += c.lines.size();
    }
    if (n != expected || total != lines)
      problems += fmt(" %zu lines -> %zu chunks (expected %zu);", lines, n, expected);
  }
  fs::remove_all(dir);

  std::size_t grid_bad = 0;
  for (std::size_t w : {40, 80, 160, 320})
    for (std::size_t s : {5, 10, 20, 40})
      for (std::size_t len : {std::size_t{0}, w - 1, w, w + 1, w + s, std::size_t{1000}, std::size_t{4321}, std::size_t{1000000}}) {
        Chunk c;
        c.lines.resize(len);
        const auto windows = make_windows(c, w, s);
        const std::size_t expect = len < w ? 0 : (len - w) / s + 1;
        grid_bad += windows.size() != expect || window_count(len, w, s) != expect;
      }
  if (grid_bad) problems += fmt(" %zu window-count mismatches on the W x S grid;", grid_bad);
  return verdict(problems.empty(),
                 problems.empty() ? "11.2M/4.75M/2.5M lines -> 12/5/3 chunks; window counts match on 16-cell grid"
                                  : problems);
}

// Shared by the end-to-end and determinism criteria.
fs::path synthetic_corpus(const fs::path& dir) {
  const fs::path path = dir / "corpus.log";
  SyntheticCorpusSpec spec;  // 200K lines, 1% anomalous, seed 0
  write_synthetic_corpus(path, spec);
  return path;
}

Json e2e_config(const fs::path& corpus) {
  return {{"dataset", {{"path", corpus.string()}, {"format", "generic"}}},
          {"window", 40},
          {"stride", 5},
          {"k", 5},
          {"embedding", {{"kind", "tfidf"}}},
          {"n_train", 2000},
          {"n_test_normal", 1000},
          {"n_test_anomalous", 5000},
          {"seed", 0},
          {"inference_reps", 50}};
}

Outcome end_to_end() {
  const auto t0 = Clock::now();
  const fs::path dir = scratch_dir("e2e");
  auto root = e2e_config(synthetic_corpus(dir));
  root["detector"] = {"ocsvm", "deepsvdd", "kde", "gmm"};
  const auto sweep = run_sweep(root, dir, dir / "out");
  const double s = seconds(t0);
  bool ok = sweep.failures == 0 && s < 300.0;
  std::string d;
  for (const auto& cell : sweep.cells) {
    const auto kind = cell.config.detector.kind;
    const auto& ch = cell.summary.chunks;
    if (ch.size() != 1 || ch[0].status != ChunkOutcome::Status::kReported) {
      ok = false;
      d += std::string(to_string(kind)) + " not reported; ";
      continue;
    }
    const auto& m = ch[0].metrics["metrics"];
    const double a = m["auroc"].get<double>(), fpr = m["fpr_at_95tpr"].get<double>();
    const bool strict = kind == DetectorKind::kOcsvm || kind == DetectorKind::kDeepSvdd;
    const bool cell_ok = strict ? (a >= 0.95 && fpr <= 0.25) : a >= 0.85;
    ok = ok && cell_ok;
    d += fmt("%s AUROC %.4f FPR@95TPR %.3f%s; ", std::string(to_string(kind)).c_str(), a, fpr,
             cell_ok ? "" : (strict ? " (needs >= 0.95 / <= 0.25)" : " (needs >= 0.85)"));
  }
  d += fmt("%.1f s (limit 300 s)", s);
  return verdict(ok, d);
}

Outcome optional_dataset() {
  const char* path = std::getenv("K4_BGL_LOG");
  if (!path || !*path) return skip("set K4_BGL_LOG to a BGL log to run");
  const fs::path dir = scratch_dir("bgl");
  Json root{{"dataset", {{"path", path}, {"format", "bgl"}}},
            {"window", 320},
            {"stride", 5},
            {"k", 5},
            {"embedding", {{"kind", "tfidf"}}},
            {"detector", "ocsvm"},
            {"n_train", 20000},
            {"max_chunks", 1},
            {"seed", 0}};
  const auto cfg = config_from_json(root, fs::current_path());
  const auto r = run_experiment(cfg, dir / "out");
  if (r.chunks.empty() || r.chunks[0].status != ChunkOutcome::Status::kReported)
    return fail("first chunk not reported: " + (r.chunks.empty() ? std::string("no chunks") : r.chunks[0].reason));
  const double a = r.chunks[0].metrics["metrics"]["auroc"].get<double>();
  return verdict(a >= 0.95, fmt("BGL chunk 0 AUROC %.4f (needs >= 0.95)", a));
}

// PRDC rows of a realistic shape: a query batch featurized against a reference.
Matrix prdc_rows(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  const auto ref = oracle::random_matrix(rng, n, 16);
  const auto query = oracle::random_matrix(rng, n, 16);
  return compute_prdc(ref, query, 5).values;
}

Outcome runtime_bounds() {
  const auto rows = prdc_rows(20'000, 5);
  std::string d;
  bool ok = true;
  for (auto kind : {DetectorKind::kGmm, DetectorKind::kKde, DetectorKind::kOcsvm, DetectorKind::kDeepSvdd}) {
    DetectorConfig cfg;
    cfg.kind = kind;
    Matrix x = rows;
    if (standardizes_features(kind)) x = Standardizer::fit(rows).apply(rows);
    const auto t0 = Clock::now();
    const auto model = fit_detector(x, cfg);
    const double fit_s = seconds(t0);
    Matrix one(1, 4);
    std::size_t next = 0;
    const double per_sample = median_seconds(1001, [&] {
      std::copy_n(x.row(next % x.rows()).begin(), 4, one.row(0).begin());
      ++next;
      (void)score(model, one);
    });
    const bool kind_ok = fit_s <= 10.0 && per_sample <= 100e-6;
    ok = ok && kind_ok;
    d += fmt("%s fit %.2f s, score %.1f us%s; ", std::string(to_string(kind)).c_str(), fit_s, per_sample * 1e6,
             kind_ok ? "" : " (limit 10 s / 100 us)");
  }
  Rng rng(6);
  const PrdcReference reference(oracle::random_matrix(rng, 10'000, 64), 5);
  const auto batch = oracle::random_matrix(rng, 6, 64);
  const double prdc_s = median_seconds(25, [&] { (void)reference.featurize(batch); });
  ok = ok && prdc_s <= 10e-3;
  d += fmt("PRDC of a k+1 batch vs 10000x64 reference %.2f ms (limit 10 ms)", prdc_s * 1e3);
  return verdict(ok, d);
}

// Every .json and .csv under `dir`, keyed by relative path. Timing files
// record wall-clock measurements and are excluded by design.
std::map<std::string, std::string> metric_files(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension();
    const auto name = e.path().filename().string();
    if ((ext != ".json" && ext != ".csv") || name.starts_with("timing")) continue;
    out[fs::relative(e.path(), dir).string()] = read_file(e.path());
  }
  return out;
}

Outcome determinism() {
  const fs::path dir = scratch_dir("determinism");
  auto root = e2e_config(synthetic_corpus(dir));
  root["detector"] = "deepsvdd";
  root["save_bundle"] = true;
  write_file(dir / "run.json", root.dump(2));
  std::map<std::string, std::map<std::string, std::string>> runs;
  for (int threads : {1, 8})
    for (int rep : {0, 1}) {
      const std::string name = fmt("t%d_r%d", threads, rep);
      const std::string cmd = fmt("\"%s\" run --config \"%s\" --out \"%s\" --threads %d > /dev/null 2>&1", K4_CLI_PATH,
                                  (dir / "run.json").c_str(), (dir / name).c_str(), threads);
      if (std::system(cmd.c_str()) != 0) return fail("k4 run failed: " + cmd);
      runs[name] = metric_files(dir / name);
    }
  std::string d;
  bool ok = true;
  auto compare = [&](const std::string& a, const std::string& b) {
    if (runs[a] == runs[b]) return;
    ok = false;
    for (const auto& [file, bytes] : runs[a]) {
      auto it = runs[b].find(file);
      if (it == runs[b].end() || it->second != bytes) d += a + " vs " + b + " differ in " + file + "; ";
    }
  };
  compare("t1_r0", "t1_r1");
  compare("t8_r0", "t8_r1");
  compare("t1_r0", "t8_r0");
  if (runs["t1_r0"].size() < 10) {
    ok = false;
    d += "too few artifacts written; ";
  }
  d += fmt("%zu JSON/CSV artifacts compared across 2 runs each at --threads 1 and 8", runs["t1_r0"].size());
  return verdict(ok, d);
}

Outcome detector_sanity() {
  std::vector<std::string> problems;

  // OCSVM nu-property.
  double worst_frac = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(1000 + seed);
    const auto x = oracle::random_matrix(rng, 500, 4);
    OcsvmConfig cfg;
    const auto m = fit_ocsvm(x, cfg);
    std::size_t out = 0;
    for (std::size_t i = 0; i < x.rows(); ++i) out += m.decision(x.row(i)) < 0.0;
    const double frac = static_cast<double>(out) / 500.0;
    worst_frac = std::max(worst_frac, frac);
    if (frac > cfg.nu + 0.05) problems.push_back(fmt("OCSVM seed %llu outlier fraction %.3f", (unsigned long long)seed, frac));
  }

  // EM monotonicity.
  double worst_drop = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(2000 + seed);
    Matrix x = oracle::random_matrix(rng, 600, 4);
    for (std::size_t i = 0; i < 300; ++i) x(i, 0) += 4.0;
    GmmConfig cfg;
    cfg.seed = seed;
    const auto model = fit_gmm(x, cfg);
    const auto& trace = model.log_likelihood_trace();
    for (std::size_t t = 1; t < trace.size(); ++t) worst_drop = std::max(worst_drop, trace[t - 1] - trace[t]);
  }
  if (worst_drop > 1e-9) problems.push_back(fmt("EM log-likelihood dropped by %.3g", worst_drop));

  // DeepSVDD radius.
  {
    Rng rng(3000);
    const auto x = oracle::random_matrix(rng, 1000, 4);
    DeepSvddConfig cfg;
    const auto m = fit_deepsvdd(x, cfg);
    if (m.radius_sq() != nearest_rank(m.score(x), 1.0 - cfg.nu)) problems.push_back("DeepSVDD R^2 is not the quantile");
  }

  // 10-sigma outliers.
  std::string means;
  {
    Rng rng(4000);
    const auto train = oracle::random_matrix(rng, 1000, 4);
    const auto inliers = oracle::random_matrix(rng, 500, 4);
    Matrix outliers = oracle::random_matrix(rng, 50, 4);
    for (std::size_t i = 0; i < outliers.rows(); ++i) {
      double norm = 0.0;
      for (double v : outliers.row(i)) norm += v * v;
      norm = std::sqrt(norm);
      for (auto& v : outliers.row(i)) v *= 10.0 / norm;
    }
    auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
    for (auto kind : {DetectorKind::kGmm, DetectorKind::kKde, DetectorKind::kOcsvm, DetectorKind::kDeepSvdd}) {
      DetectorConfig cfg;
      cfg.kind = kind;
      const auto m = fit_detector(train, cfg);
      const double in = mean(score(m, inliers)), out = mean(score(m, outliers));
      means += fmt(" %s %.3g<%.3g", std::string(to_string(kind)).c_str(), in, out);
      if (!(out > in)) problems.push_back(std::string(to_string(kind)) + " does not rank 10-sigma outliers higher");
    }
  }
  std::string d = fmt("OCSVM worst outlier fraction %.3f over 50 seeds (nu 0.1); EM worst drop %.2g; mean scores",
                      worst_frac, worst_drop) +
                  means;
  for (const auto& p : problems) d += "; " + p;
  return verdict(problems.empty(), d);
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"prdc-oracle-equivalence", prdc_oracle},
      {"prdc-hand-worked-case", prdc_hand_case},
      {"prdc-scaling-invariance", prdc_scaling},
      {"metric-oracles", metric_oracles},
      {"chunk-count-reproduction", chunk_counts},
      {"end-to-end-synthetic-detection", end_to_end},
      {"optional-bgl-reproduction", optional_dataset},
      {"runtime-bounds", runtime_bounds},
      {"determinism", determinism},
      {"detector-sanity", detector_sanity},
  };
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = fail(std::string("exception: ") + e.what());
    }
    const char* tag = o.status == Outcome::Status::kPass ? "PASS" : o.status == Outcome::Status::kFail ? "FAIL" : "SKIP";
    failures += o.status == Outcome::Status::kFail;
    std::printf("%s %s: %s\n", tag, name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
