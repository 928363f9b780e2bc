#pragma once

// Isotropic Gaussian kernel density estimate. Score = -log density.
//
// PRDC rows are highly discrete (binary precision/coverage, count-valued
// recall/density), so identical training rows are merged into one kernel
// carrying their multiplicity; the density is unchanged.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "k4/binary_io.hpp"
#include "k4/core.hpp"
#include "k4/detectors/linalg.hpp"
#include "k4/parallel.hpp"

namespace k4 {

struct KdeConfig {
  // Fixed bandwidth; Scott's rule when unset.
  std::optional<double> bandwidth;
};

inline constexpr double kKdeBandwidthFloor = 1e-6;

// sqrt of the mean per-column population variance.
inline double pooled_std(const Matrix& x) {
  const std::size_t n = x.rows(), d = x.cols();
  double total = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += x(i, j);
    mu /= static_cast<double>(n);
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) v += (x(i, j) - mu) * (x(i, j) - mu);
    total += v / static_cast<double>(n);
  }
  return std::sqrt(total / static_cast<double>(d));
}

// n^(-1/(d+4)) * sigma
inline double scott_bandwidth(std::size_t n, std::size_t dims, double sigma) {
  return std::pow(static_cast<double>(n), -1.0 / (static_cast<double>(dims) + 4.0)) * sigma;
}

class KdeModel {
 public:
  // Kernel terms more than this many nats below the largest term are skipped;
  // e^-40 per term is far below double resolution of the sum.
  static constexpr double kCutoffNats = 40.0;

  KdeModel() = default;
  KdeModel(Matrix train, double bandwidth) : train_(std::move(train)), h_(bandwidth) {
    if (!(h_ > 0.0) || !std::isfinite(h_)) throw InvalidInput("KDE bandwidth must be positive");
    merge_duplicates();
  }

  const Matrix& train_points() const noexcept { return train_; }
  double bandwidth() const noexcept { return h_; }
  std::size_t dims() const noexcept { return train_.cols(); }

  // Distinct training rows and their multiplicities.
  const Matrix& kernel_points() const noexcept { return points_; }
  const std::vector<double>& kernel_weights() const noexcept { return weights_; }

  double log_density(std::span<const double> x, std::vector<double>& sq) const {
    const std::size_t n = points_.rows(), d = points_.cols();
    sq.resize(n);
    double min_sq = std::numeric_limits<double>::infinity();
    const double* p = points_.data().data();
    for (std::size_t i = 0; i < n; ++i, p += d) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += (x[j] - p[j]) * (x[j] - p[j]);
      sq[i] = s;
      min_sq = std::min(min_sq, s);
    }
    const double inv2h2 = 1.0 / (2.0 * h_ * h_);
    const double limit = kCutoffNats / inv2h2;
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double excess = sq[i] - min_sq;
      if (excess <= limit) sum += weights_[i] * std::exp(-excess * inv2h2);
    }
    return -min_sq * inv2h2 + std::log(sum) - std::log(static_cast<double>(train_.rows())) -
           0.5 * static_cast<double>(d) * (linalg::kLog2Pi + 2.0 * std::log(h_));
  }

  std::vector<double> score(const Matrix& x) const {
    if (x.cols() != dims())
      throw InvalidInput("KDE expects " + std::to_string(dims()) + " features, got " + std::to_string(x.cols()));
    std::vector<double> s(x.rows());
    parallel_blocks(x.rows(), 64, [&](std::size_t lo, std::size_t hi) {
      std::vector<double> sq;
      for (std::size_t i = lo; i < hi; ++i) s[i] = -log_density(x.row(i), sq);
    });
    return s;
  }

  void serialize(ByteWriter& w) const {
    w.f64(h_);
    w.u64(train_.rows());
    w.u64(train_.cols());
    w.f64s(train_.data());
  }

  static KdeModel deserialize(ByteReader& r) {
    const double h = r.f64();
    const auto n = r.count(8);
    const auto d = r.count(8);
    if (n == 0 || d == 0) r.fail("empty KDE training set");
    if (n > r.remaining() / 8 / d) r.fail("KDE payload shorter than declared");
    Matrix train(n, d, r.f64s(n * d));
    return KdeModel(std::move(train), h);
  }

 private:
  void merge_duplicates() {
    const std::size_t n = train_.rows(), d = train_.cols();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto row_less = [&](std::size_t a, std::size_t b) {
      const auto ra = train_.row(a), rb = train_.row(b);
      return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
    };
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return row_less(a, b) || (!row_less(b, a) && a < b); });
    std::vector<double> flat;
    weights_.clear();
    for (std::size_t t = 0; t < n; ++t) {
      if (t > 0 && !row_less(order[t - 1], order[t])) {
        weights_.back() += 1.0;
        continue;
      }
      const auto r = train_.row(order[t]);
      flat.insert(flat.end(), r.begin(), r.end());
      weights_.push_back(1.0);
    }
    points_ = Matrix(weights_.size(), d, std::move(flat));
  }

  Matrix train_;
  Matrix points_;
  std::vector<double> weights_;
  double h_ = 1.0;
};

inline KdeModel fit_kde(const Matrix& train, const KdeConfig& cfg = {}) {
  if (train.rows() < 2) throw InvalidInput("KDE needs at least 2 training rows");
  validate_embedding(train, "KDE training features");
  double h;
  if (cfg.bandwidth) {
    h = *cfg.bandwidth;
    if (!(h > 0.0)) throw InvalidInput("KDE bandwidth must be positive");
  } else {
    h = std::max(scott_bandwidth(train.rows(), train.cols(), pooled_std(train)), kKdeBandwidthFloor);
  }
  return KdeModel(train, h);
}

}  // namespace k4
