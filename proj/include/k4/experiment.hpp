#pragma once

// Chunked evaluation protocol: per chunk, window the lines, sample train/test
// windows, embed, train the typicality pipeline, score the test windows and
// report metrics, diagnostics and timings. Every stage writes a documented
// artifact so runs can be resumed or fed external embeddings:
//
//   chunk_XXXX/manifest.csv     all windows of the chunk
//   chunk_XXXX/split.csv        sampled windows and their role (train/test)
//   chunk_XXXX/split.json       supply, shortfalls, usability
//   chunk_XXXX/train.k4em       training embeddings     (staged runs only)
//   chunk_XXXX/test.k4em        test embeddings         (staged runs only)
//   chunk_XXXX/vocab.csv        TF-IDF vocabulary
//   chunk_XXXX/pipeline.json    threshold and pipeline shape
//   chunk_XXXX/bundle/          trained pipeline        (staged or save_bundle)
//   chunk_XXXX/scores.csv       one row per test window
//   chunk_XXXX/metrics.json     evaluation + config snapshot
//   chunk_XXXX/roc_points.csv, score_hist.csv, density_recall.csv
//   chunk_XXXX/timing.json      wall-clock timings (not deterministic)

#include <algorithm>
#include <chrono>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "k4/config.hpp"
#include "k4/embedding.hpp"
#include "k4/ingest.hpp"
#include "k4/metrics.hpp"
#include "k4/pipeline.hpp"

namespace k4 {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

struct CurationConfig {
  bool enabled = true;
  std::vector<std::string> keywords = default_keywords();
  std::size_t radius = 0;
};

enum class EmbeddingKind { kTfidf, kExternal };

struct EmbeddingConfig {
  EmbeddingKind kind = EmbeddingKind::kTfidf;
  TfidfConfig tfidf;
  std::string path;  // K4EM file for external embeddings
};

struct ExperimentConfig {
  std::string dataset_path;
  LogFormat format = LogFormat::kGeneric;
  std::string labels_path;  // HDFS block labels
  std::size_t chunk_size = 1'000'000;
  std::optional<std::size_t> max_chunks;
  std::size_t window = 40;
  std::size_t stride = 5;
  std::size_t k = 5;
  EmbeddingConfig embedding;
  DetectorConfig detector;
  std::size_t n_train = 5000;
  std::size_t n_test_normal = 5000;
  std::size_t n_test_anomalous = 5000;
  std::uint64_t seed = 0;
  CurationConfig curation;
  double threshold_percentile = 95.0;
  std::size_t inference_reps = 1000;
  bool save_bundle = false;
  std::string output = "k4_out";

  // Directory relative paths are resolved against (not serialised).
  fs::path base_dir;

  fs::path resolve(const std::string& p) const {
    if (p.empty()) return {};
    fs::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  }
};

inline Json config_to_json(const ExperimentConfig& c) {
  Json j;
  j["dataset"] = {{"path", c.dataset_path},
                  {"format", std::string(to_string(c.format))},
                  {"labels", c.labels_path.empty() ? Json(nullptr) : Json(c.labels_path)}};
  j["chunk_size"] = c.chunk_size;
  j["max_chunks"] = c.max_chunks ? Json(*c.max_chunks) : Json(nullptr);
  j["window"] = c.window;
  j["stride"] = c.stride;
  j["k"] = c.k;
  if (c.embedding.kind == EmbeddingKind::kTfidf)
    j["embedding"] = {{"kind", "tfidf"},
                      {"max_features", c.embedding.tfidf.max_features},
                      {"lowercase", c.embedding.tfidf.lowercase}};
  else
    j["embedding"] = {{"kind", "external"}, {"path", c.embedding.path}};
  j["detector"] = detector_to_json(c.detector);
  j["n_train"] = c.n_train;
  j["n_test_normal"] = c.n_test_normal;
  j["n_test_anomalous"] = c.n_test_anomalous;
  j["seed"] = c.seed;
  j["curation"] = {{"enabled", c.curation.enabled}, {"keywords", c.curation.keywords}, {"radius", c.curation.radius}};
  j["threshold_percentile"] = c.threshold_percentile;
  j["inference_reps"] = c.inference_reps;
  j["save_bundle"] = c.save_bundle;
  j["output"] = c.output;
  return j;
}

// The config as echoed into run artifacts: everything that determines the
// results, without the output location, so identical runs written to
// different directories produce identical files.
inline Json config_record(const ExperimentConfig& c) {
  Json j = config_to_json(c);
  j.erase("output");
  return j;
}

inline ExperimentConfig config_from_json(const Json& j, const fs::path& base_dir = {}) {
  using detail::read_opt;
  detail::reject_unknown_keys(j,
                              {"dataset", "chunk_size", "max_chunks", "window", "stride", "k", "embedding", "detector",
                               "n_train", "n_test_normal", "n_test_anomalous", "seed", "curation",
                               "threshold_percentile", "inference_reps", "save_bundle", "output"},
                              "config");
  ExperimentConfig c;
  c.base_dir = base_dir;
  try {
    const Json& ds = j.at("dataset");
    detail::reject_unknown_keys(ds, {"path", "format", "labels"}, "dataset");
    c.dataset_path = ds.at("path").get<std::string>();
    if (ds.contains("format")) c.format = parse_log_format(ds.at("format").get<std::string>());
    read_opt(ds, "labels", c.labels_path);
    read_opt(j, "chunk_size", c.chunk_size);
    if (auto it = j.find("max_chunks"); it != j.end() && !it->is_null()) c.max_chunks = it->get<std::size_t>();
    read_opt(j, "window", c.window);
    read_opt(j, "stride", c.stride);
    read_opt(j, "k", c.k);
    read_opt(j, "seed", c.seed);
    if (auto it = j.find("embedding"); it != j.end()) {
      const Json& e = *it;
      const auto kind = e.value("kind", std::string("tfidf"));
      if (kind == "tfidf") {
        detail::reject_unknown_keys(e, {"kind", "max_features", "lowercase"}, "embedding");
        read_opt(e, "max_features", c.embedding.tfidf.max_features);
        read_opt(e, "lowercase", c.embedding.tfidf.lowercase);
      } else if (kind == "external") {
        detail::reject_unknown_keys(e, {"kind", "path"}, "embedding");
        c.embedding.kind = EmbeddingKind::kExternal;
        c.embedding.path = e.at("path").get<std::string>();
      } else {
        throw InvalidInput("unknown embedding kind '" + kind + "'");
      }
    }
    if (auto it = j.find("detector"); it != j.end()) c.detector = detector_from_json(*it, c.seed);
    else c.detector.gmm.seed = c.detector.deepsvdd.seed = c.seed;
    read_opt(j, "n_train", c.n_train);
    read_opt(j, "n_test_normal", c.n_test_normal);
    read_opt(j, "n_test_anomalous", c.n_test_anomalous);
    if (auto it = j.find("curation"); it != j.end()) {
      detail::reject_unknown_keys(*it, {"enabled", "keywords", "radius"}, "curation");
      read_opt(*it, "enabled", c.curation.enabled);
      read_opt(*it, "keywords", c.curation.keywords);
      read_opt(*it, "radius", c.curation.radius);
    }
    read_opt(j, "threshold_percentile", c.threshold_percentile);
    read_opt(j, "inference_reps", c.inference_reps);
    read_opt(j, "save_bundle", c.save_bundle);
    read_opt(j, "output", c.output);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("config: ") + e.what());
  }
  if (c.dataset_path.empty()) throw InvalidInput("config: dataset.path is required");
  if (c.chunk_size < 1 || c.window < 1 || c.stride < 1 || c.k < 1)
    throw InvalidInput("config: chunk_size, window, stride and k must be >= 1");
  if (c.n_train < 1 || c.n_test_normal < 1 || c.n_test_anomalous < 1)
    throw InvalidInput("config: sample counts must be >= 1");
  if (!(c.threshold_percentile > 0.0 && c.threshold_percentile < 100.0))
    throw InvalidInput("config: threshold_percentile must lie in (0, 100)");
  if (c.inference_reps < 1) throw InvalidInput("config: inference_reps must be >= 1");
  if (c.format == LogFormat::kHdfs && c.labels_path.empty())
    throw InvalidInput("config: hdfs datasets need dataset.labels (BlockId,Label CSV)");
  return c;
}

inline Json parse_json_text(std::string_view text, const std::string& context) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(context + ": " + e.what());
  }
}

inline Json load_json(const fs::path& path) { return parse_json_text(read_file(path), path.string()); }

// Axes that may hold a list in a sweep config, outermost first.
inline const std::vector<std::string>& sweep_axes() {
  static const std::vector<std::string> axes{"window", "stride", "n_train", "detector", "k"};
  return axes;
}

// Cartesian product over list-valued sweep axes; a config without lists
// expands to itself.
inline std::vector<Json> expand_grid(const Json& root) {
  std::vector<Json> cells{root};
  for (const auto& axis : sweep_axes()) {
    auto it = root.find(axis);
    if (it == root.end() || !it->is_array()) continue;
    if (it->empty()) throw InvalidInput("sweep axis '" + axis + "' is an empty list");
    std::vector<Json> next;
    for (const auto& cell : cells)
      for (const auto& v : *it) {
        Json c = cell;
        c[axis] = v;
        next.push_back(std::move(c));
      }
    cells = std::move(next);
  }
  return cells;
}

// ---------------------------------------------------------------------------
// Per-chunk stages

inline std::string chunk_dir_name(std::size_t chunk_id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "chunk_%04zu", chunk_id);
  return buf;
}

struct SplitSummary {
  std::size_t chunk_id = 0;
  std::size_t lines = 0;
  std::size_t windows = 0;
  std::size_t normal_windows = 0;
  std::size_t anomalous_windows = 0;
  std::size_t train_eligible = 0;
  SplitSpec spec;
};

inline Json to_json(const SplitSummary& s, const ExperimentConfig& c) {
  return {{"chunk_id", s.chunk_id},
          {"lines", s.lines},
          {"windows", s.windows},
          {"normal_windows", s.normal_windows},
          {"anomalous_windows", s.anomalous_windows},
          {"train_eligible", s.train_eligible},
          {"usable", s.spec.usable},
          {"unusable_reason", s.spec.unusable_reason},
          {"seed", s.spec.seed},
          {"requested", {{"train", c.n_train}, {"test_normal", c.n_test_normal}, {"test_anomalous", c.n_test_anomalous}}},
          {"taken",
           {{"train", s.spec.train.size()},
            {"test_normal", s.spec.test_normal.size()},
            {"test_anomalous", s.spec.test_anomalous.size()}}},
          {"shortfall",
           {{"train", s.spec.shortfall_train},
            {"test_normal", s.spec.shortfall_test_normal},
            {"test_anomalous", s.spec.shortfall_test_anomalous}}}};
}

struct PreparedChunk {
  std::vector<LabeledWindow> windows;
  SplitSummary summary;
};

// Windows, training-pool curation and sampling.
inline PreparedChunk prepare_chunk(const ExperimentConfig& c, const Chunk& chunk) {
  PreparedChunk p;
  p.windows = make_windows(chunk, c.window, c.stride);
  auto& s = p.summary;
  s.chunk_id = chunk.chunk_id;
  s.lines = chunk.lines.size();
  s.windows = p.windows.size();
  for (const auto& w : p.windows) (w.anomalous ? s.anomalous_windows : s.normal_windows)++;
  std::optional<std::vector<std::size_t>> eligible;
  if (c.curation.enabled) {
    eligible = keyword_filter(chunk, p.windows, c.curation.keywords, c.curation.radius);
    for (auto i : *eligible) s.train_eligible += p.windows[i].anomaly_count == 0;
  } else {
    s.train_eligible = s.normal_windows;
  }
  s.spec = sample_sets(p.windows, {c.n_train, c.n_test_normal, c.n_test_anomalous, c.seed},
                       eligible ? &*eligible : nullptr);
  return p;
}

// The reference/query split needs 2(k+1) training windows.
inline void require_training_supply(SplitSummary& s, std::size_t k) {
  if (s.spec.usable && s.spec.train.size() < 2 * (k + 1)) {
    s.spec.usable = false;
    s.spec.unusable_reason = "only " + std::to_string(s.spec.train.size()) +
                             " training windows; the reference/query split needs 2(k+1) = " +
                             std::to_string(2 * (k + 1));
  }
}

// Test windows in ascending window order (normal and anomalous interleaved).
inline std::vector<std::size_t> test_rows(const SplitSpec& s) {
  std::vector<std::size_t> rows;
  std::merge(s.test_normal.begin(), s.test_normal.end(), s.test_anomalous.begin(), s.test_anomalous.end(),
             std::back_inserter(rows));
  return rows;
}

// role,window_id,chunk_id,start,anomaly_count,label
inline std::string split_csv(const std::vector<LabeledWindow>& windows, const SplitSpec& s) {
  std::ostringstream os;
  os << "role,window_id,chunk_id,start,anomaly_count,label\n";
  auto emit = [&](const char* role, const std::vector<std::size_t>& idx) {
    for (auto i : idx) {
      const auto& w = windows[i];
      os << role << ',' << window_id(w) << ',' << w.chunk_id << ',' << w.start << ',' << w.anomaly_count << ','
         << (w.anomalous ? 1 : 0) << '\n';
    }
  };
  emit("train", s.train);
  emit("test_normal", s.test_normal);
  emit("test_anomalous", s.test_anomalous);
  return os.str();
}

// Recovers the sampled window indices from split.csv against the chunk's windows.
inline SplitSpec parse_split_csv(std::string_view text, const std::vector<LabeledWindow>& windows,
                                 const std::string& context) {
  std::unordered_map<std::uint64_t, std::size_t> index;
  for (std::size_t i = 0; i < windows.size(); ++i) index.emplace(window_id(windows[i]), i);
  SplitSpec s;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || line.empty()) continue;
    const auto comma = line.find(',');
    const auto role = line.substr(0, comma);
    std::uint64_t id = 0;
    const char* b = line.data() + comma + 1;
    if (comma == std::string::npos || std::from_chars(b, line.data() + line.size(), id).ec != std::errc())
      throw FormatError(context + ":" + std::to_string(lineno) + ": malformed split row");
    auto it = index.find(id);
    if (it == index.end())
      throw FormatError(context + ":" + std::to_string(lineno) + ": window id " + std::to_string(id) +
                        " is not a window of this chunk");
    if (role == "train") s.train.push_back(it->second);
    else if (role == "test_normal") s.test_normal.push_back(it->second);
    else if (role == "test_anomalous") s.test_anomalous.push_back(it->second);
    else throw FormatError(context + ":" + std::to_string(lineno) + ": unknown role '" + role + "'");
  }
  return s;
}

struct EmbeddedSets {
  Matrix train, test;
  std::vector<std::uint64_t> train_ids, test_ids;
  std::optional<TfidfVocab> vocab;
  double embed_train_s = 0.0;
  double embed_test_s = 0.0;
};

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Row lookup into an external embedding file by window id.
class ExternalEmbeddings {
 public:
  explicit ExternalEmbeddings(EmbeddingFile f) : file_(std::move(f)) {
    for (std::size_t i = 0; i < file_.ids.size(); ++i)
      if (!index_.emplace(file_.ids[i], i).second)
        throw FormatError("external embeddings repeat window id " + std::to_string(file_.ids[i]));
  }

  Matrix select(std::span<const std::uint64_t> ids) const {
    std::vector<std::size_t> rows;
    rows.reserve(ids.size());
    for (auto id : ids) {
      auto it = index_.find(id);
      if (it == index_.end())
        throw InvalidInput("external embeddings have no row for window id " + std::to_string(id) + " (chunk " +
                           std::to_string(id >> 32) + ", start " + std::to_string(id & 0xffffffffu) + ")");
      rows.push_back(it->second);
    }
    return file_.matrix.select_rows(rows);
  }

 private:
  EmbeddingFile file_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
};

inline std::vector<std::uint64_t> ids_of(const std::vector<LabeledWindow>& windows, std::span<const std::size_t> rows) {
  std::vector<std::uint64_t> ids;
  ids.reserve(rows.size());
  for (auto r : rows) ids.push_back(window_id(windows[r]));
  return ids;
}

// TF-IDF is fitted on the training windows only.
inline EmbeddedSets embed_sets(const ExperimentConfig& c, const std::vector<LabeledWindow>& windows,
                               const SplitSpec& split, const ChunkTokens* tokens,
                               const ExternalEmbeddings* external) {
  EmbeddedSets e;
  const auto test = test_rows(split);
  e.train_ids = ids_of(windows, split.train);
  e.test_ids = ids_of(windows, test);
  auto t0 = Clock::now();
  if (c.embedding.kind == EmbeddingKind::kTfidf) {
    if (!tokens) throw InvalidInput("TF-IDF embedding needs the chunk's tokens");
    e.vocab = fit_tfidf(*tokens, windows, split.train, c.embedding.tfidf);
    e.train = embed_windows(*e.vocab, *tokens, windows, split.train);
    e.embed_train_s = seconds_since(t0);
    t0 = Clock::now();
    e.test = embed_windows(*e.vocab, *tokens, windows, test);
    e.embed_test_s = seconds_since(t0);
  } else {
    if (!external) throw InvalidInput("external embedding file not loaded");
    e.train = external->select(e.train_ids);
    e.embed_train_s = seconds_since(t0);
    t0 = Clock::now();
    e.test = external->select(e.test_ids);
    e.embed_test_s = seconds_since(t0);
  }
  return e;
}

struct ScoreRow {
  std::uint64_t window_id = 0;
  std::size_t chunk_id = 0, start = 0;
  int label = 0;
  std::size_t anomaly_count = 0;
  double score = 0.0;
};

inline std::string scores_csv(const std::vector<ScoreRow>& rows) {
  std::string s = "window_id,chunk_id,start,label,anomaly_count,score\n";
  for (const auto& r : rows)
    s += std::to_string(r.window_id) + ',' + std::to_string(r.chunk_id) + ',' + std::to_string(r.start) + ',' +
         std::to_string(r.label) + ',' + std::to_string(r.anomaly_count) + ',' + format_double(r.score) + '\n';
  return s;
}

inline std::vector<ScoreRow> parse_scores_csv(std::string_view text, const std::string& context) {
  std::vector<ScoreRow> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || line.empty()) continue;
    ScoreRow r;
    const char* p = line.data();
    const char* end = line.data() + line.size();
    auto field = [&](auto& v) {
      auto res = std::from_chars(p, end, v);
      if (res.ec != std::errc()) throw FormatError(context + ":" + std::to_string(lineno) + ": malformed scores row");
      p = res.ptr;
      if (p < end) {
        if (*p != ',') throw FormatError(context + ":" + std::to_string(lineno) + ": malformed scores row");
        ++p;
      }
    };
    field(r.window_id);
    field(r.chunk_id);
    field(r.start);
    field(r.label);
    field(r.anomaly_count);
    field(r.score);
    if (p != end) throw FormatError(context + ":" + std::to_string(lineno) + ": trailing fields");
    out.push_back(r);
  }
  return out;
}

struct ChunkTiming {
  double embed_train_s = 0.0;
  double embed_test_s = 0.0;
  double fit_s = 0.0;
  double per_sample_inference_s = 0.0;  // median single-row detector call
  double prdc_min_batch_s = 0.0;        // median PRDC featurisation of a k+1 row batch
};

inline Json to_json(const ChunkTiming& t) {
  return {{"embed_train_s", t.embed_train_s},
          {"embed_test_s", t.embed_test_s},
          {"fit_s", t.fit_s},
          {"per_sample_inference_s", t.per_sample_inference_s},
          {"per_sample_inference_method", "median of single-row detector calls (standardisation included)"},
          {"prdc_min_batch_s", t.prdc_min_batch_s}};
}

inline double median_seconds(std::size_t reps, const std::function<void()>& fn) {
  std::vector<double> t(reps);
  for (auto& x : t) {
    const auto t0 = Clock::now();
    fn();
    x = seconds_since(t0);
  }
  std::nth_element(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(reps / 2), t.end());
  return std::max(t[reps / 2], 1e-9);
}

struct ScoredChunk {
  std::optional<TrainedPipeline> pipeline;
  std::vector<ScoreRow> rows;
  Json pipeline_info;
  double fit_s = 0.0;
};

inline ScoredChunk train_and_score(const ExperimentConfig& c, const EmbeddedSets& e,
                                   const std::unordered_map<std::uint64_t, const LabeledWindow*>& by_id) {
  ScoredChunk out;
  PipelineConfig pc;
  pc.k = c.k;
  pc.seed = c.seed;
  pc.detector = c.detector;
  const auto t0 = Clock::now();
  out.pipeline.emplace(train_pipeline(e.train, pc, &e.train_ids));
  out.fit_s = seconds_since(t0);
  auto& p = *out.pipeline;
  p.set_threshold(select_threshold(p.train_scores(), c.threshold_percentile));
  const auto scores = p.score(e.test);
  out.rows.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    auto it = by_id.find(e.test_ids[i]);
    if (it == by_id.end()) throw InvalidInput("test window id " + std::to_string(e.test_ids[i]) + " not in manifest");
    const auto& w = *it->second;
    out.rows.push_back({e.test_ids[i], w.chunk_id, w.start, w.anomalous ? 1 : 0, w.anomaly_count, scores[i]});
  }
  out.pipeline_info = {{"k", p.k()},
                       {"embedding_dims", p.dims()},
                       {"reference_rows", p.reference().embeddings().rows()},
                       {"query_rows", p.train_scores().size()},
                       {"threshold_percentile", c.threshold_percentile},
                       {"threshold", *p.threshold()},
                       {"provenance", hex64(p.provenance())}};
  return out;
}

// Timings of the smallest scoring units, measured on already-scored test data.
inline void measure_inference(const ExperimentConfig& c, const TrainedPipeline& p, const Matrix& test,
                              ChunkTiming& t) {
  const std::size_t batch = std::min(test.rows(), p.k() + 1);
  std::vector<std::size_t> first(batch);
  for (std::size_t i = 0; i < batch; ++i) first[i] = i;
  const Matrix mini = test.select_rows(first);
  const std::size_t prdc_reps = std::min<std::size_t>(c.inference_reps, 25);
  t.prdc_min_batch_s = median_seconds(prdc_reps, [&] { (void)p.reference().featurize(mini); });
  const Matrix raw = p.reference().featurize(mini).values;
  const std::size_t one[1] = {0};
  const Matrix row = raw.select_rows(one);
  volatile double sink = 0.0;
  t.per_sample_inference_s = median_seconds(c.inference_reps, [&] {
    const Matrix f = p.standardizer() ? p.standardizer()->apply(row) : row;
    sink = sink + score(p.detector(), f)[0];
  });
}

// metrics.json content from the scored test windows; deterministic.
inline Json chunk_metrics(const ExperimentConfig& c, const Json& split_json, const Json& pipeline_info,
                          const std::vector<ScoreRow>& rows) {
  std::vector<double> s;
  std::vector<int> y;
  for (const auto& r : rows) s.push_back(r.score), y.push_back(r.label);
  const auto eval = evaluate(s, y);
  const double t = pipeline_info.at("threshold").get<double>();
  const auto pred = classify(s, t);
  long long tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i]) (pred[i] ? tp : fn)++;
    else (pred[i] ? fp : tn)++;
  }
  Json dep{{"threshold_percentile", c.threshold_percentile},
           {"threshold", t},
           {"rule", "score > threshold"},
           {"tp", tp},
           {"fp", fp},
           {"tn", tn},
           {"fn", fn},
           {"precision", tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0},
           {"recall", tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0},
           {"fpr", fp + tn ? static_cast<double>(fp) / static_cast<double>(fp + tn) : 0.0}};
  return {{"chunk_id", split_json.at("chunk_id")},
          {"usable", true},
          {"metrics", to_json(eval)},
          {"deployment", dep},
          {"test_windows", rows.size()},
          {"pipeline", pipeline_info},
          {"split", split_json},
          {"seed", c.seed},
          {"config", config_record(c)}};
}

inline Json unusable_metrics(const ExperimentConfig& c, const Json& split_json) {
  return {{"chunk_id", split_json.at("chunk_id")},
          {"usable", false},
          {"unusable_reason", split_json.at("unusable_reason")},
          {"split", split_json},
          {"seed", c.seed},
          {"config", config_record(c)}};
}

inline void write_json(const fs::path& path, const Json& j) { write_file(path, j.dump(2) + "\n"); }

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

// Writes metrics.json and the diagnostics CSVs for a scored chunk.
inline Json evaluate_chunk(const ExperimentConfig& c, const fs::path& dir, const Json& split_json,
                           const Json& pipeline_info, const std::vector<ScoreRow>& rows) {
  Json m = chunk_metrics(c, split_json, pipeline_info, rows);
  std::vector<double> s;
  std::vector<int> y;
  std::vector<std::size_t> counts;
  for (const auto& r : rows) s.push_back(r.score), y.push_back(r.label), counts.push_back(r.anomaly_count);
  export_diagnostics(s, y, counts, m["metrics"]["threshold"].get<double>(), dir);
  write_json(dir / "metrics.json", m);
  return m;
}

// ---------------------------------------------------------------------------
// Experiment driver

struct DatasetSource {
  std::optional<BlockLabels> blocks;

  explicit DatasetSource(const ExperimentConfig& c) {
    if (c.format == LogFormat::kHdfs) blocks = load_block_labels(c.resolve(c.labels_path));
  }

  // Calls fn(chunk) for each chunk, honouring max_chunks. Returns parse stats.
  ParseStats for_each_chunk(const ExperimentConfig& c, const std::function<void(const Chunk&)>& fn) const {
    ChunkReader reader(c.resolve(c.dataset_path), c.format, c.chunk_size, blocks ? &*blocks : nullptr);
    Chunk chunk;
    std::size_t n = 0;
    while ((!c.max_chunks || n < *c.max_chunks) && reader.next(chunk)) {
      fn(chunk);
      ++n;
    }
    return reader.stats();
  }
};

inline Json to_json(const ParseStats& s) {
  return {{"lines", s.lines},
          {"anomalous_lines", s.anomalous},
          {"skipped_empty_lines", s.skipped_empty},
          {"unknown_block_ids", s.unknown_block_ids},
          {"repaired_utf8_lines", s.repaired_utf8}};
}

struct ChunkOutcome {
  std::size_t chunk_id = 0;
  enum class Status { kReported, kSkipped, kFailed } status = Status::kReported;
  std::string reason;
  Json metrics;
  ChunkTiming timing;
};

inline std::string_view to_string(ChunkOutcome::Status s) {
  switch (s) {
    case ChunkOutcome::Status::kReported: return "reported";
    case ChunkOutcome::Status::kSkipped: return "skipped";
    case ChunkOutcome::Status::kFailed: return "failed";
  }
  return "unknown";
}

// Caches the embedding work shared by cells that differ only in detector or k.
struct EmbeddingCacheKey {
  std::size_t window = 0, stride = 0, n_train = 0, n_test_normal = 0, n_test_anomalous = 0;
  std::uint64_t seed = 0;
  bool operator==(const EmbeddingCacheKey&) const = default;
};

struct ChunkCache {
  std::optional<EmbeddingCacheKey> key;
  PreparedChunk prepared;
  std::optional<EmbeddedSets> embedded;
  std::size_t embedded_k = 0;
};

// Runs one config on one chunk, writing the chunk directory. Throws on module errors.
inline ChunkOutcome run_chunk(const ExperimentConfig& c, const Chunk& chunk, const ChunkTokens* tokens,
                              const ExternalEmbeddings* external, const fs::path& dir, ChunkCache* cache = nullptr) {
  ChunkOutcome out;
  out.chunk_id = chunk.chunk_id;
  ensure_dir(dir);
  ChunkCache local;
  ChunkCache& cc = cache ? *cache : local;
  const EmbeddingCacheKey key{c.window, c.stride, c.n_train, c.n_test_normal, c.n_test_anomalous, c.seed};
  const bool hit = cc.key && *cc.key == key;
  if (!hit) {
    cc.key = key;
    cc.prepared = prepare_chunk(c, chunk);
    cc.embedded.reset();
  }
  PreparedChunk& prep = cc.prepared;
  SplitSummary summary = prep.summary;
  require_training_supply(summary, c.k);
  const Json split_json = to_json(summary, c);
  write_file(dir / "manifest.csv", manifest_csv(prep.windows));
  write_file(dir / "split.csv", split_csv(prep.windows, summary.spec));
  write_json(dir / "split.json", split_json);
  if (!summary.spec.usable) {
    out.status = ChunkOutcome::Status::kSkipped;
    out.reason = summary.spec.unusable_reason;
    out.metrics = unusable_metrics(c, split_json);
    write_json(dir / "metrics.json", out.metrics);
    return out;
  }
  if (!cc.embedded) cc.embedded = embed_sets(c, prep.windows, summary.spec, tokens, external);
  const EmbeddedSets& e = *cc.embedded;
  if (e.vocab) write_file(dir / "vocab.csv", e.vocab->to_csv());

  std::unordered_map<std::uint64_t, const LabeledWindow*> by_id;
  for (const auto& w : prep.windows) by_id.emplace(window_id(w), &w);
  auto scored = train_and_score(c, e, by_id);
  write_json(dir / "pipeline.json", scored.pipeline_info);
  write_file(dir / "scores.csv", scores_csv(scored.rows));
  if (c.save_bundle) save_bundle(dir / "bundle", *scored.pipeline, config_record(c));
  out.metrics = evaluate_chunk(c, dir, split_json, scored.pipeline_info, scored.rows);

  out.timing.embed_train_s = std::max(e.embed_train_s, 1e-9);
  out.timing.embed_test_s = std::max(e.embed_test_s, 1e-9);
  out.timing.fit_s = std::max(scored.fit_s, 1e-9);
  measure_inference(c, *scored.pipeline, e.test, out.timing);
  write_json(dir / "timing.json", to_json(out.timing));
  return out;
}

inline const std::vector<std::string>& metric_keys() {
  static const std::vector<std::string> keys{"auroc", "auprc", "fpr_at_95tpr", "f1", "precision", "recall"};
  return keys;
}

struct RunSummary {
  std::vector<ChunkOutcome> chunks;
  ParseStats parse;
  double parse_s = 0.0;

  std::size_t count(ChunkOutcome::Status s) const {
    return static_cast<std::size_t>(
        std::count_if(chunks.begin(), chunks.end(), [&](const ChunkOutcome& c) { return c.status == s; }));
  }
  bool ok() const { return count(ChunkOutcome::Status::kFailed) == 0; }
};

// summary.json: deterministic aggregate (arithmetic means over reported chunks).
inline Json summary_json(const ExperimentConfig& c, const RunSummary& r) {
  Json chunks = Json::array();
  Json mean = Json::object();
  std::size_t reported = 0;
  for (const auto& k : metric_keys()) mean[k] = 0.0;
  for (const auto& ch : r.chunks) {
    Json e{{"chunk_id", ch.chunk_id}, {"status", std::string(to_string(ch.status))}};
    if (ch.status == ChunkOutcome::Status::kReported) {
      e["metrics"] = ch.metrics.at("metrics");
      for (const auto& k : metric_keys()) mean[k] = mean[k].get<double>() + ch.metrics["metrics"][k].get<double>();
      ++reported;
    } else {
      e["reason"] = ch.reason;
    }
    chunks.push_back(e);
  }
  if (reported)
    for (const auto& k : metric_keys()) mean[k] = mean[k].get<double>() / static_cast<double>(reported);
  return {{"config", config_record(c)},
          {"seed", c.seed},
          {"chunks_total", r.chunks.size()},
          {"chunks_reported", reported},
          {"chunks_skipped", r.count(ChunkOutcome::Status::kSkipped)},
          {"chunks_failed", r.count(ChunkOutcome::Status::kFailed)},
          {"mean", reported ? mean : Json(nullptr)},
          {"chunks", chunks}};
}

inline Json timing_summary_json(const RunSummary& r) {
  ChunkTiming mean;
  std::size_t n = 0;
  Json per = Json::array();
  for (const auto& ch : r.chunks) {
    if (ch.status != ChunkOutcome::Status::kReported) continue;
    Json t = to_json(ch.timing);
    t["chunk_id"] = ch.chunk_id;
    per.push_back(t);
    mean.embed_train_s += ch.timing.embed_train_s;
    mean.embed_test_s += ch.timing.embed_test_s;
    mean.fit_s += ch.timing.fit_s;
    mean.per_sample_inference_s += ch.timing.per_sample_inference_s;
    mean.prdc_min_batch_s += ch.timing.prdc_min_batch_s;
    ++n;
  }
  if (n) {
    const double d = static_cast<double>(n);
    mean.embed_train_s /= d;
    mean.embed_test_s /= d;
    mean.fit_s /= d;
    mean.per_sample_inference_s /= d;
    mean.prdc_min_batch_s /= d;
  }
  return {{"parse_s", r.parse_s}, {"mean", n ? to_json(mean) : Json(nullptr)}, {"chunks", per}};
}

using Logger = std::function<void(const std::string&)>;

struct Cell {
  ExperimentConfig config;
  fs::path dir;
  RunSummary summary;
};

inline std::string cell_label(const ExperimentConfig& c) {
  return "W" + std::to_string(c.window) + "_S" + std::to_string(c.stride) + "_n" + std::to_string(c.n_train) + "_" +
         std::string(to_string(c.detector.kind)) + "_k" + std::to_string(c.k);
}

// Streams the dataset once and runs every cell on every chunk. A failure in
// one (cell, chunk) is recorded and does not stop the others unless
// `stop_on_error` is set.
inline void run_cells(std::vector<Cell>& cells, bool stop_on_error, const Logger& log = {}) {
  if (cells.empty()) return;
  const ExperimentConfig& base = cells.front().config;
  for (const auto& cell : cells)
    if (cell.config.dataset_path != base.dataset_path || cell.config.chunk_size != base.chunk_size ||
        cell.config.format != base.format || cell.config.max_chunks != base.max_chunks)
      throw InvalidInput("sweep cells must share dataset and chunking settings");

  std::optional<ExternalEmbeddings> external;
  if (base.embedding.kind == EmbeddingKind::kExternal)
    external.emplace(load_external(base.resolve(base.embedding.path)));

  DatasetSource source(base);
  double busy_s = 0.0;
  const auto t_all = Clock::now();
  const auto stats = source.for_each_chunk(base, [&](const Chunk& chunk) {
    const auto t_chunk = Clock::now();
    std::optional<ChunkTokens> tokens;
    ChunkCache cache;
    for (auto& cell : cells) {
      const auto& c = cell.config;
      if (c.embedding.kind == EmbeddingKind::kTfidf && (!tokens || tokens->lowercase() != c.embedding.tfidf.lowercase))
        tokens.emplace(chunk, c.embedding.tfidf.lowercase);
      const fs::path dir = cell.dir / chunk_dir_name(chunk.chunk_id);
      ChunkOutcome o;
      try {
        o = run_chunk(c, chunk, tokens ? &*tokens : nullptr, external ? &*external : nullptr, dir, &cache);
      } catch (const std::exception& e) {
        if (stop_on_error) throw;
        o.chunk_id = chunk.chunk_id;
        o.status = ChunkOutcome::Status::kFailed;
        o.reason = e.what();
      }
      if (log) {
        std::string msg = cell_label(c) + " " + chunk_dir_name(chunk.chunk_id) + ": " + std::string(to_string(o.status));
        if (o.status == ChunkOutcome::Status::kReported)
          msg += " auroc=" + format_double(o.metrics["metrics"]["auroc"].get<double>());
        else
          msg += " (" + o.reason + ")";
        log(msg);
      }
      cell.summary.chunks.push_back(std::move(o));
    }
    busy_s += seconds_since(t_chunk);
  });
  const double parse_s = std::max(seconds_since(t_all) - busy_s, 1e-9);
  for (auto& cell : cells) {
    cell.summary.parse = stats;
    cell.summary.parse_s = parse_s;
    write_json(cell.dir / "parse.json", to_json(stats));
    write_json(cell.dir / "summary.json", summary_json(cell.config, cell.summary));
    write_json(cell.dir / "timing_summary.json", timing_summary_json(cell.summary));
  }
}

inline RunSummary run_experiment(const ExperimentConfig& c, const fs::path& out_dir, const Logger& log = {}) {
  ensure_dir(out_dir);
  std::vector<Cell> cells{{c, out_dir, {}}};
  run_cells(cells, /*stop_on_error=*/true, log);
  return std::move(cells.front().summary);
}

// One row per (cell, reported chunk).
inline std::string sweep_summary_csv(const std::vector<Cell>& cells) {
  std::string s = "cell,window,stride,n_train,detector,k,chunk_id,status,auroc,auprc,fpr_at_95tpr,f1,precision,recall\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i].config;
    for (const auto& ch : cells[i].summary.chunks) {
      s += std::to_string(i) + ',' + std::to_string(c.window) + ',' + std::to_string(c.stride) + ',' +
           std::to_string(c.n_train) + ',' + std::string(to_string(c.detector.kind)) + ',' + std::to_string(c.k) + ',' +
           std::to_string(ch.chunk_id) + ',' + std::string(to_string(ch.status));
      for (const auto& k : metric_keys())
        s += ',' + (ch.status == ChunkOutcome::Status::kReported ? format_double(ch.metrics["metrics"][k].get<double>())
                                                                  : std::string());
      s += '\n';
    }
  }
  return s;
}

struct SweepResult {
  std::vector<Cell> cells;
  std::size_t failures = 0;
};

inline SweepResult run_sweep(const Json& root, const fs::path& base_dir, const fs::path& out_dir,
                             const Logger& log = {}) {
  SweepResult r;
  const auto grid = expand_grid(root);
  ensure_dir(out_dir);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    Cell cell;
    cell.config = config_from_json(grid[i], base_dir);
    char name[32];
    std::snprintf(name, sizeof name, "cell_%04zu", i);
    cell.dir = out_dir / name;
    ensure_dir(cell.dir);
    r.cells.push_back(std::move(cell));
  }
  run_cells(r.cells, /*stop_on_error=*/false, log);
  Json index = Json::array();
  for (std::size_t i = 0; i < r.cells.size(); ++i) {
    r.failures += r.cells[i].summary.count(ChunkOutcome::Status::kFailed);
    index.push_back({{"cell", i},
                     {"dir", r.cells[i].dir.filename().string()},
                     {"label", cell_label(r.cells[i].config)},
                     {"chunks_failed", r.cells[i].summary.count(ChunkOutcome::Status::kFailed)}});
  }
  write_file(out_dir / "sweep_summary.csv", sweep_summary_csv(r.cells));
  write_json(out_dir / "sweep.json", {{"cells", r.cells.size()}, {"failures", r.failures}, {"index", index}});
  return r;
}

// ---------------------------------------------------------------------------
// Stage commands: windows -> embed -> score -> eval, each reading the previous
// stage's artifacts from the chunk directory.

inline std::size_t stage_windows(const ExperimentConfig& c, const fs::path& out_dir, const Logger& log = {}) {
  ensure_dir(out_dir);
  DatasetSource source(c);
  std::size_t n = 0;
  const auto stats = source.for_each_chunk(c, [&](const Chunk& chunk) {
    const fs::path dir = out_dir / chunk_dir_name(chunk.chunk_id);
    ensure_dir(dir);
    auto prep = prepare_chunk(c, chunk);
    require_training_supply(prep.summary, c.k);
    write_file(dir / "manifest.csv", manifest_csv(prep.windows));
    write_file(dir / "split.csv", split_csv(prep.windows, prep.summary.spec));
    write_json(dir / "split.json", to_json(prep.summary, c));
    if (log) log(chunk_dir_name(chunk.chunk_id) + ": " + std::to_string(prep.windows.size()) + " windows");
    ++n;
  });
  write_json(out_dir / "parse.json", to_json(stats));
  return n;
}

inline Json read_split_json(const fs::path& dir) {
  if (!fs::exists(dir / "split.json"))
    throw IoError((dir / "split.json").string() + " is missing; run the windows stage first");
  return load_json(dir / "split.json");
}

inline std::size_t stage_embed(const ExperimentConfig& c, const fs::path& out_dir, const Logger& log = {}) {
  std::optional<ExternalEmbeddings> external;
  if (c.embedding.kind == EmbeddingKind::kExternal) external.emplace(load_external(c.resolve(c.embedding.path)));
  DatasetSource source(c);
  std::size_t n = 0;
  source.for_each_chunk(c, [&](const Chunk& chunk) {
    const fs::path dir = out_dir / chunk_dir_name(chunk.chunk_id);
    const Json split = read_split_json(dir);
    if (!split.at("usable").get<bool>()) return;
    if (!fs::exists(dir / "manifest.csv")) throw IoError((dir / "manifest.csv").string() + " is missing");
    const auto windows = parse_manifest_csv(read_file(dir / "manifest.csv"), (dir / "manifest.csv").string());
    const auto spec = parse_split_csv(read_file(dir / "split.csv"), windows, (dir / "split.csv").string());
    std::optional<ChunkTokens> tokens;
    if (c.embedding.kind == EmbeddingKind::kTfidf) tokens.emplace(chunk, c.embedding.tfidf.lowercase);
    const auto e = embed_sets(c, windows, spec, tokens ? &*tokens : nullptr, external ? &*external : nullptr);
    save_embeddings(dir / "train.k4em", {e.train, e.train_ids});
    save_embeddings(dir / "test.k4em", {e.test, e.test_ids});
    if (e.vocab) write_file(dir / "vocab.csv", e.vocab->to_csv());
    if (log) log(chunk_dir_name(chunk.chunk_id) + ": embedded " + std::to_string(e.train.rows()) + " train / " +
                 std::to_string(e.test.rows()) + " test windows");
    ++n;
  });
  return n;
}

inline std::vector<fs::path> chunk_dirs(const fs::path& out_dir) {
  std::vector<fs::path> dirs;
  if (!fs::is_directory(out_dir)) throw IoError(out_dir.string() + " is not a directory");
  for (const auto& e : fs::directory_iterator(out_dir))
    if (e.is_directory() && e.path().filename().string().rfind("chunk_", 0) == 0) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

inline std::size_t stage_score(const ExperimentConfig& c, const fs::path& out_dir, const Logger& log = {}) {
  std::size_t n = 0;
  for (const auto& dir : chunk_dirs(out_dir)) {
    const Json split = read_split_json(dir);
    if (!split.at("usable").get<bool>()) continue;
    for (const char* f : {"manifest.csv", "train.k4em", "test.k4em"})
      if (!fs::exists(dir / f)) throw IoError((dir / f).string() + " is missing; run the embed stage first");
    const auto windows = parse_manifest_csv(read_file(dir / "manifest.csv"), (dir / "manifest.csv").string());
    const auto train = load_external(dir / "train.k4em", windows);
    const auto test = load_external(dir / "test.k4em", windows);
    std::unordered_map<std::uint64_t, const LabeledWindow*> by_id;
    for (const auto& w : windows) by_id.emplace(window_id(w), &w);
    EmbeddedSets e;
    e.train = train.matrix;
    e.train_ids = train.ids;
    e.test = test.matrix;
    e.test_ids = test.ids;
    auto scored = train_and_score(c, e, by_id);
    save_bundle(dir / "bundle", *scored.pipeline, config_record(c));
    write_json(dir / "pipeline.json", scored.pipeline_info);
    write_file(dir / "scores.csv", scores_csv(scored.rows));
    if (log) log(dir.filename().string() + ": scored " + std::to_string(scored.rows.size()) + " windows");
    ++n;
  }
  return n;
}

inline RunSummary stage_eval(const ExperimentConfig& c, const fs::path& out_dir, const Logger& log = {}) {
  RunSummary r;
  for (const auto& dir : chunk_dirs(out_dir)) {
    const Json split = read_split_json(dir);
    ChunkOutcome o;
    o.chunk_id = split.at("chunk_id").get<std::size_t>();
    if (!split.at("usable").get<bool>()) {
      o.status = ChunkOutcome::Status::kSkipped;
      o.reason = split.at("unusable_reason").get<std::string>();
      o.metrics = unusable_metrics(c, split);
      write_json(dir / "metrics.json", o.metrics);
    } else {
      for (const char* f : {"scores.csv", "pipeline.json"})
        if (!fs::exists(dir / f)) throw IoError((dir / f).string() + " is missing; run the score stage first");
      const auto rows = parse_scores_csv(read_file(dir / "scores.csv"), (dir / "scores.csv").string());
      o.metrics = evaluate_chunk(c, dir, split, load_json(dir / "pipeline.json"), rows);
    }
    if (log) log(dir.filename().string() + ": " + std::string(to_string(o.status)));
    r.chunks.push_back(std::move(o));
  }
  write_json(out_dir / "summary.json", summary_json(c, r));
  return r;
}

}  // namespace k4
