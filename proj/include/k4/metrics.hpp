#pragma once

// Detection metrics over (score, label) pairs, higher score = more anomalous,
// label 1 = anomalous. Tied scores form a single operating point.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "k4/binary_io.hpp"
#include "k4/core.hpp"

namespace k4 {

struct EvalResult {
  double auroc = 0.0;
  double auprc = 0.0;
  double fpr_at_95tpr = 0.0;
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double threshold = 0.0;
  long long tp = 0, fp = 0, tn = 0, fn = 0;
};

inline nlohmann::ordered_json to_json(const EvalResult& r) {
  return {{"auroc", r.auroc}, {"auprc", r.auprc}, {"fpr_at_95tpr", r.fpr_at_95tpr},
          {"f1", r.f1},       {"precision", r.precision}, {"recall", r.recall},
          {"threshold", r.threshold}, {"tp", r.tp}, {"fp", r.fp}, {"tn", r.tn}, {"fn", r.fn}};
}

namespace detail {

// One operating point per distinct score, in descending score order, with
// cumulative counts of everything scored >= that value.
struct SweepPoint {
  double threshold;
  long long tp, fp;
  long long group_pos, group_neg;
};

struct Sweep {
  std::vector<SweepPoint> points;
  long long pos = 0, neg = 0;
};

inline Sweep sweep(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw InvalidInput("scores and labels differ in length");
  Sweep s;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw InvalidInput("non-finite score at index " + std::to_string(i));
    if (labels[i] != 0 && labels[i] != 1) throw InvalidInput("labels must be 0 or 1");
    (labels[i] ? s.pos : s.neg)++;
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  long long tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double t = scores[order[i]];
    long long gp = 0, gn = 0;
    for (; i < order.size() && scores[order[i]] == t; ++i) (labels[order[i]] ? gp : gn)++;
    tp += gp;
    fp += gn;
    s.points.push_back({t, tp, fp, gp, gn});
  }
  return s;
}

inline void need_both(const Sweep& s, const char* metric) {
  if (s.pos == 0 || s.neg == 0)
    throw UndefinedMetric(std::string(metric) + " needs at least one positive and one negative label");
}

}  // namespace detail

// Mann-Whitney: (concordant + ties/2) / (P*N).
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  const auto s = detail::sweep(scores, labels);
  detail::need_both(s, "AUROC");
  long long conc = 0, ties = 0;
  for (const auto& p : s.points) {
    const long long neg_below = s.neg - p.fp;
    conc += p.group_pos * neg_below;
    ties += p.group_pos * p.group_neg;
  }
  return (static_cast<double>(conc) + 0.5 * static_cast<double>(ties)) /
         (static_cast<double>(s.pos) * static_cast<double>(s.neg));
}

// Right-step (average precision) area under the precision-recall curve.
inline double auprc(std::span<const double> scores, std::span<const int> labels) {
  const auto s = detail::sweep(scores, labels);
  if (s.pos == 0) throw UndefinedMetric("AUPRC needs at least one positive label");
  double ap = 0.0;
  long long prev_tp = 0;
  for (const auto& p : s.points) {
    if (p.tp != prev_tp) {
      const double precision = static_cast<double>(p.tp) / static_cast<double>(p.tp + p.fp);
      ap += static_cast<double>(p.tp - prev_tp) / static_cast<double>(s.pos) * precision;
      prev_tp = p.tp;
    }
  }
  return ap;
}

// Smallest false-positive rate over thresholds whose true-positive rate reaches the target.
inline double fpr_at_tpr(std::span<const double> scores, std::span<const int> labels, double tpr_target = 0.95) {
  const auto s = detail::sweep(scores, labels);
  detail::need_both(s, "FPR@TPR");
  for (const auto& p : s.points)
    if (static_cast<double>(p.tp) / static_cast<double>(s.pos) >= tpr_target)
      return static_cast<double>(p.fp) / static_cast<double>(s.neg);
  return 1.0;
}

struct F1Point {
  double f1 = 0.0, precision = 0.0, recall = 0.0, threshold = 0.0;
  long long tp = 0, fp = 0, tn = 0, fn = 0;
};

// Maximises F1 over every distinct score used as a threshold (predict score >= t).
// Ties go to higher precision, then to the higher threshold.
inline F1Point best_f1(std::span<const double> scores, std::span<const int> labels) {
  const auto s = detail::sweep(scores, labels);
  if (s.pos == 0) throw UndefinedMetric("F1 needs at least one positive label");
  const detail::SweepPoint* best = nullptr;
  // F1 = 2TP / (2TP + FP + FN) = 2TP / (TP + FP + P); compared by cross-multiplication.
  auto better = [&](const detail::SweepPoint& a, const detail::SweepPoint& b) {
    const long long da = a.tp + a.fp + s.pos, db = b.tp + b.fp + s.pos;
    const __int128 lhs = static_cast<__int128>(a.tp) * db, rhs = static_cast<__int128>(b.tp) * da;
    if (lhs != rhs) return lhs > rhs;
    const __int128 pa = static_cast<__int128>(a.tp) * (b.tp + b.fp), pb = static_cast<__int128>(b.tp) * (a.tp + a.fp);
    return pa > pb;
  };
  for (const auto& p : s.points)
    if (!best || better(p, *best)) best = &p;
  F1Point r;
  r.threshold = best->threshold;
  r.tp = best->tp;
  r.fp = best->fp;
  r.fn = s.pos - best->tp;
  r.tn = s.neg - best->fp;
  r.precision = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp);
  r.recall = static_cast<double>(r.tp) / static_cast<double>(s.pos);
  r.f1 = 2.0 * static_cast<double>(r.tp) / static_cast<double>(2 * r.tp + r.fp + r.fn);
  return r;
}

inline EvalResult evaluate(std::span<const double> scores, std::span<const int> labels) {
  EvalResult r;
  r.auroc = auroc(scores, labels);
  r.auprc = auprc(scores, labels);
  r.fpr_at_95tpr = fpr_at_tpr(scores, labels, 0.95);
  const auto f = best_f1(scores, labels);
  r.f1 = f.f1;
  r.precision = f.precision;
  r.recall = f.recall;
  r.threshold = f.threshold;
  r.tp = f.tp;
  r.fp = f.fp;
  r.tn = f.tn;
  r.fn = f.fn;
  return r;
}

struct DensityBucket {
  std::size_t lo = 0, hi = 0;  // anomaly_count in [lo, hi)
  std::size_t windows = 0, detected = 0;
  double recall = 0.0;
};

// Bucket edges 1, 2, 4, 8, ... covering the largest count.
inline std::vector<std::size_t> power_of_two_edges(std::size_t max_count) {
  std::vector<std::size_t> e{1};
  while (e.back() <= max_count) e.push_back(e.back() * 2);
  return e;
}

// Recall per anomaly-density bucket over anomalous windows. Empty buckets are omitted.
inline std::vector<DensityBucket> density_recall(std::span<const std::size_t> anomaly_counts,
                                                 std::span<const int> predictions,
                                                 std::vector<std::size_t> edges = {}) {
  if (anomaly_counts.size() != predictions.size()) throw InvalidInput("counts and predictions differ in length");
  std::size_t max_count = 0;
  for (auto c : anomaly_counts) max_count = std::max(max_count, c);
  if (edges.empty()) edges = power_of_two_edges(max_count);
  if (!std::is_sorted(edges.begin(), edges.end()) || edges.size() < 2) throw InvalidInput("bad bucket edges");
  std::vector<DensityBucket> b(edges.size() - 1);
  for (std::size_t i = 0; i + 1 < edges.size(); ++i) b[i] = {edges[i], edges[i + 1], 0, 0, 0.0};
  for (std::size_t i = 0; i < anomaly_counts.size(); ++i) {
    const auto c = anomaly_counts[i];
    if (c == 0) continue;
    auto it = std::upper_bound(edges.begin(), edges.end(), c);
    if (it == edges.begin() || it == edges.end()) throw InvalidInput("anomaly count outside bucket edges");
    auto& bucket = b[static_cast<std::size_t>(it - edges.begin()) - 1];
    ++bucket.windows;
    bucket.detected += predictions[i] != 0;
  }
  std::vector<DensityBucket> out;
  for (auto& x : b)
    if (x.windows > 0) {
      x.recall = static_cast<double>(x.detected) / static_cast<double>(x.windows);
      out.push_back(x);
    }
  return out;
}

inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

struct RocPoint {
  double fpr, tpr, threshold;
};

inline std::vector<RocPoint> roc_points(std::span<const double> scores, std::span<const int> labels) {
  const auto s = detail::sweep(scores, labels);
  detail::need_both(s, "ROC");
  std::vector<RocPoint> pts{{0.0, 0.0, std::numeric_limits<double>::infinity()}};
  for (const auto& p : s.points)
    pts.push_back({static_cast<double>(p.fp) / static_cast<double>(s.neg),
                   static_cast<double>(p.tp) / static_cast<double>(s.pos), p.threshold});
  return pts;
}

inline constexpr std::size_t kHistogramBins = 50;

inline std::string roc_csv(std::span<const double> scores, std::span<const int> labels) {
  std::string s = "fpr,tpr,threshold\n";
  for (const auto& p : roc_points(scores, labels))
    s += format_double(p.fpr) + ',' + format_double(p.tpr) + ',' + format_double(p.threshold) + '\n';
  return s;
}

inline std::string histogram_csv(std::span<const double> scores, std::span<const int> labels) {
  if (scores.empty()) throw InvalidInput("histogram of no scores");
  const auto [mn, mx] = std::minmax_element(scores.begin(), scores.end());
  const double lo = *mn, hi = *mx, width = (hi - lo) / static_cast<double>(kHistogramBins);
  std::vector<std::size_t> normal(kHistogramBins, 0), anomalous(kHistogramBins, 0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    std::size_t b = 0;
    if (hi > lo)
      b = std::min(kHistogramBins - 1,
                   static_cast<std::size_t>((scores[i] - lo) / (hi - lo) * static_cast<double>(kHistogramBins)));
    (labels[i] ? anomalous : normal)[b]++;
  }
  std::string s = "bin_lo,bin_hi,normal_count,anomalous_count\n";
  for (std::size_t b = 0; b < kHistogramBins; ++b) {
    const double blo = lo + width * static_cast<double>(b);
    const double bhi = b + 1 == kHistogramBins ? hi : lo + width * static_cast<double>(b + 1);
    s += format_double(blo) + ',' + format_double(bhi) + ',' + std::to_string(normal[b]) + ',' +
         std::to_string(anomalous[b]) + '\n';
  }
  return s;
}

inline std::string density_recall_csv(const std::vector<DensityBucket>& buckets) {
  std::string s = "bucket_lo,bucket_hi,windows,detected,recall\n";
  for (const auto& b : buckets)
    s += std::to_string(b.lo) + ',' + std::to_string(b.hi) + ',' + std::to_string(b.windows) + ',' +
         std::to_string(b.detected) + ',' + format_double(b.recall) + '\n';
  return s;
}

// Writes roc_points.csv, score_hist.csv and density_recall.csv into out_dir.
// Density predictions use `threshold` with the >= rule of the F1 sweep.
inline void export_diagnostics(std::span<const double> scores, std::span<const int> labels,
                               std::span<const std::size_t> anomaly_counts, double threshold,
                               const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  write_file(out_dir / "roc_points.csv", roc_csv(scores, labels));
  write_file(out_dir / "score_hist.csv", histogram_csv(scores, labels));
  std::vector<int> pred(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) pred[i] = scores[i] >= threshold ? 1 : 0;
  write_file(out_dir / "density_recall.csv", density_recall_csv(density_recall(anomaly_counts, pred)));
}

}  // namespace k4
