#pragma once

// Typicality pipeline: split normal training embeddings into a reference half
// and a query half, featurise the query half by per-point PRDC against the
// reference, fit a one-class detector on those features, and score new
// batches against the same reference.

#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "k4/binary_io.hpp"
#include "k4/config.hpp"
#include "k4/core.hpp"
#include "k4/detector.hpp"
#include "k4/embedding.hpp"
#include "k4/prdc.hpp"
#include "k4/rng.hpp"

namespace k4 {

struct PipelineConfig {
  std::size_t k = 5;
  DetectorConfig detector;
  std::uint64_t seed = 0;
  PrdcOptions prdc;
};

// Hash of everything a fitted pipeline depends on: reference bytes, k, split
// seed and detector settings.
inline std::uint64_t pipeline_provenance(const Matrix& reference, std::size_t k, std::uint64_t seed,
                                         const DetectorConfig& detector) {
  Fnv1a h;
  h.update(std::to_string(reference.rows()) + "x" + std::to_string(reference.cols()) + ";");
  h.update(reference.data());
  h.update(";k=" + std::to_string(k) + ";seed=" + std::to_string(seed) + ";");
  h.update(detector_to_json(detector).dump());
  return h.digest();
}

class TrainedPipeline {
 public:
  TrainedPipeline(PrdcReference reference, std::vector<std::uint64_t> reference_ids, std::uint64_t seed,
                  DetectorConfig config, std::optional<Standardizer> standardizer, DetectorModel detector)
      : reference_(std::move(reference)),
        reference_ids_(std::move(reference_ids)),
        seed_(seed),
        config_(std::move(config)),
        standardizer_(std::move(standardizer)),
        detector_(std::move(detector)) {
    if (reference_ids_.size() != reference_.embeddings().rows())
      throw InvalidInput("one id per reference row required");
    provenance_ = pipeline_provenance(reference_.embeddings(), reference_.k(), seed_, config_);
  }

  const PrdcReference& reference() const noexcept { return reference_; }
  const std::vector<std::uint64_t>& reference_ids() const noexcept { return reference_ids_; }
  std::size_t k() const noexcept { return reference_.k(); }
  std::size_t dims() const noexcept { return reference_.dims(); }
  std::uint64_t seed() const noexcept { return seed_; }
  const DetectorConfig& config() const noexcept { return config_; }
  const std::optional<Standardizer>& standardizer() const noexcept { return standardizer_; }
  const DetectorModel& detector() const noexcept { return detector_; }
  std::uint64_t provenance() const noexcept { return provenance_; }

  const std::optional<double>& threshold() const noexcept { return threshold_; }
  void set_threshold(double t) {
    if (!std::isfinite(t)) throw InvalidInput("threshold must be finite");
    threshold_ = t;
  }

  // Scores of the query half the detector was fitted on (for percentile thresholds).
  const std::vector<double>& train_scores() const noexcept { return train_scores_; }
  void set_train_scores(std::vector<double> s) { train_scores_ = std::move(s); }

  // Detector input for a batch: PRDC against the stored reference, then the
  // training standardisation when the detector uses one.
  Matrix features(const Matrix& batch) const {
    Matrix f = reference_.featurize(batch).values;
    if (standardizer_) f = standardizer_->apply(f);
    return f;
  }

  // Higher = more anomalous. The batch needs at least k+1 rows because
  // query-side radii are taken within the batch.
  std::vector<double> score(const Matrix& batch) const { return k4::score(detector_, features(batch)); }

  // True when the reference still hashes to the value captured at training time.
  bool verify_reference() const {
    return pipeline_provenance(reference_.embeddings(), reference_.k(), seed_, config_) == provenance_;
  }

 private:
  PrdcReference reference_;
  std::vector<std::uint64_t> reference_ids_;
  std::uint64_t seed_;
  DetectorConfig config_;
  std::optional<Standardizer> standardizer_;
  DetectorModel detector_;
  std::optional<double> threshold_;
  std::vector<double> train_scores_;
  std::uint64_t provenance_ = 0;
};

struct SplitRows {
  std::vector<std::size_t> reference;  // ceil(n/2) rows
  std::vector<std::size_t> query;      // floor(n/2) rows
};

inline SplitRows split_reference_query(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng::derive(seed, 0x7265667371);
  rng.shuffle(std::span<std::size_t>(order));
  const std::size_t n_ref = (n + 1) / 2;
  return {{order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_ref)},
          {order.begin() + static_cast<std::ptrdiff_t>(n_ref), order.end()}};
}

// Fits the pipeline on normal-only embeddings. `ids` (optional) labels each row
// for the bundle's reference file; row indices are used when omitted.
inline TrainedPipeline train_pipeline(const Matrix& train, const PipelineConfig& cfg,
                                      const std::vector<std::uint64_t>* ids = nullptr) {
  validate_embedding(train, "training embeddings");
  if (cfg.k < 1) throw InvalidInput("k must be >= 1");
  if (train.rows() < 2 * (cfg.k + 1))
    throw InvalidInput("training needs at least 2(k+1) = " + std::to_string(2 * (cfg.k + 1)) + " rows, got " +
                       std::to_string(train.rows()));
  if (ids && ids->size() != train.rows()) throw InvalidInput("one id per training row required");

  const auto split = split_reference_query(train.rows(), cfg.seed);
  std::vector<std::uint64_t> ref_ids;
  ref_ids.reserve(split.reference.size());
  for (auto r : split.reference) ref_ids.push_back(ids ? (*ids)[r] : r);

  PrdcReference reference(train.select_rows(split.reference), cfg.k, cfg.prdc);
  Matrix features = reference.featurize(train.select_rows(split.query)).values;
  std::optional<Standardizer> stdz;
  if (standardizes_features(cfg.detector.kind)) {
    stdz = Standardizer::fit(features);
    features = stdz->apply(features);
  }
  DetectorModel model = fit_detector(features, cfg.detector);
  std::vector<double> train_scores = k4::score(model, features);
  TrainedPipeline p(std::move(reference), std::move(ref_ids), cfg.seed, cfg.detector, std::move(stdz),
                    std::move(model));
  p.set_train_scores(std::move(train_scores));
  return p;
}

// Nearest-rank percentile of training scores, 0 < p < 100.
inline double select_threshold(const std::vector<double>& train_scores, double percentile) {
  if (train_scores.empty()) throw InvalidInput("threshold selection needs at least one score");
  if (!(percentile > 0.0 && percentile < 100.0)) throw InvalidInput("percentile must lie in (0, 100)");
  return nearest_rank(train_scores, percentile / 100.0);
}

// 1 iff the score strictly exceeds the threshold.
inline std::vector<int> classify(std::span<const double> scores, double threshold) {
  if (std::isnan(threshold)) throw InvalidInput("threshold is NaN");
  std::vector<int> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] > threshold ? 1 : 0;
  return out;
}

// Accumulates single rows until a batch of k+1 is available, then scores the
// whole batch at once.
class StreamingScorer {
 public:
  explicit StreamingScorer(const TrainedPipeline& p) : p_(&p) {}

  std::vector<std::pair<std::uint64_t, double>> push(std::span<const double> row, std::uint64_t id) {
    if (row.size() != p_->dims()) throw InvalidInput("row has wrong dimensionality");
    buffer_.insert(buffer_.end(), row.begin(), row.end());
    ids_.push_back(id);
    if (ids_.size() < p_->k() + 1) return {};
    Matrix batch(ids_.size(), p_->dims(), std::move(buffer_));
    const auto s = p_->score(batch);
    std::vector<std::pair<std::uint64_t, double>> out;
    for (std::size_t i = 0; i < s.size(); ++i) out.emplace_back(ids_[i], s[i]);
    buffer_.clear();
    ids_.clear();
    return out;
  }

  std::size_t pending() const noexcept { return ids_.size(); }

 private:
  const TrainedPipeline* p_;
  std::vector<double> buffer_;
  std::vector<std::uint64_t> ids_;
};

// Bundle directory: model.k4dm, reference.k4em, config.json, provenance.txt.
// `extra` is stored verbatim under "experiment" in config.json.
inline void save_bundle(const std::filesystem::path& dir, const TrainedPipeline& p, const Json& extra = Json()) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  save_model(dir / "model.k4dm", {p.detector(), p.standardizer()});
  save_embeddings(dir / "reference.k4em", {p.reference().embeddings(), p.reference_ids()});
  Json cfg{{"k", p.k()}, {"seed", p.seed()}, {"detector", detector_to_json(p.config())}};
  cfg["threshold"] = p.threshold() ? Json(*p.threshold()) : Json(nullptr);
  if (!extra.is_null()) cfg["experiment"] = extra;
  write_file(dir / "config.json", cfg.dump(2) + "\n");
  write_file(dir / "provenance.txt", hex64(p.provenance()) + "\n");
}

inline TrainedPipeline load_bundle(const std::filesystem::path& dir, const PrdcOptions& opt = {}) {
  Json cfg;
  try {
    cfg = Json::parse(read_file(dir / "config.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((dir / "config.json").string() + ": " + e.what());
  }
  auto model = load_model(dir / "model.k4dm");
  auto ref = load_external(dir / "reference.k4em");
  const auto k = cfg.at("k").get<std::size_t>();
  const auto seed = cfg.at("seed").get<std::uint64_t>();
  const auto det = detector_from_json(cfg.at("detector"));
  if (kind_of(model.detector) != det.kind) throw FormatError(dir.string() + ": model kind disagrees with config.json");
  TrainedPipeline p(PrdcReference(std::move(ref.matrix), k, opt), std::move(ref.ids), seed, det,
                    std::move(model.standardizer), std::move(model.detector));
  std::string stored = read_file(dir / "provenance.txt");
  while (!stored.empty() && (stored.back() == '\n' || stored.back() == '\r')) stored.pop_back();
  if (stored != hex64(p.provenance()))
    throw FormatError(dir.string() + ": reference embeddings or config do not match provenance " + stored);
  if (auto it = cfg.find("threshold"); it != cfg.end() && !it->is_null()) p.set_threshold(it->get<double>());
  return p;
}

}  // namespace k4
