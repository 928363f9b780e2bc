#pragma once

// Per-point precision / recall / density / coverage of query embeddings
// against a reference set of normal embeddings, from exact Euclidean kNN
// geometry. All ball-membership tests use strict inequality, so a reference
// point whose k-NN radius is 0 (k or more exact duplicates) admits nothing.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "k4/core.hpp"
#include "k4/parallel.hpp"

namespace k4 {

struct KnnRadii {
  std::vector<double> radii;
  std::size_t k = 0;
};

// m x 4 matrix with columns [P, R, D, C].
struct PrdcMatrix {
  enum Column : std::size_t { kP = 0, kR = 1, kD = 2, kC = 3 };
  static constexpr std::size_t kColumns = 4;

  Matrix values;
  std::size_t k = 0;

  std::size_t rows() const noexcept { return values.rows(); }
};

struct PrdcOptions {
  std::size_t block_rows = 1024;
};

namespace detail {

// Row access with an optional sparse index. When both rows are sparse the
// distance is accumulated over the union of non-zero columns in ascending
// column order; skipped terms are exact zeros, so the result is bit-identical
// to the dense loop.
class RowSet {
 public:
  explicit RowSet(const Matrix& m) : m_(m) {
    std::size_t nnz = 0;
    for (double v : m.data()) nnz += (v != 0.0);
    if (m.cols() >= 16 && nnz * 4 < m.data().size()) {
      offsets_.reserve(m.rows() + 1);
      offsets_.push_back(0);
      idx_.reserve(nnz);
      val_.reserve(nnz);
      for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        for (std::size_t c = 0; c < row.size(); ++c)
          if (row[c] != 0.0) {
            idx_.push_back(static_cast<std::uint32_t>(c));
            val_.push_back(row[c]);
          }
        offsets_.push_back(idx_.size());
      }
    }
  }

  bool sparse() const noexcept { return !offsets_.empty(); }
  std::size_t rows() const noexcept { return m_.rows(); }
  std::size_t cols() const noexcept { return m_.cols(); }

  friend double distance(const RowSet& a, std::size_t i, const RowSet& b, std::size_t j) {
    if (a.sparse() && b.sparse()) {
      std::size_t p = a.offsets_[i], pe = a.offsets_[i + 1];
      std::size_t q = b.offsets_[j], qe = b.offsets_[j + 1];
      double s = 0.0;
      while (p < pe && q < qe) {
        double t;
        if (a.idx_[p] == b.idx_[q]) {
          t = a.val_[p++] - b.val_[q++];
        } else if (a.idx_[p] < b.idx_[q]) {
          t = a.val_[p++] - 0.0;
        } else {
          t = 0.0 - b.val_[q++];
        }
        s += t * t;
      }
      for (; p < pe; ++p) {
        const double t = a.val_[p] - 0.0;
        s += t * t;
      }
      for (; q < qe; ++q) {
        const double t = 0.0 - b.val_[q];
        s += t * t;
      }
      return std::sqrt(s);
    }
    return dense_distance(a.m_.row(i), b.m_.row(j));
  }

  static double dense_distance(std::span<const double> x, std::span<const double> y) {
    double s = 0.0;
    for (std::size_t c = 0; c < x.size(); ++c) {
      const double t = x[c] - y[c];
      s += t * t;
    }
    return std::sqrt(s);
  }

 private:
  const Matrix& m_;
  std::vector<std::size_t> offsets_;
  std::vector<std::uint32_t> idx_;
  std::vector<double> val_;
};

inline void check_same_dims(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols())
    throw InvalidInput("dimension mismatch: " + std::to_string(a.cols()) + " vs " + std::to_string(b.cols()));
}

inline void check_k(std::size_t k, std::size_t rows, const char* which) {
  if (k < 1 || k + 1 > rows)
    throw InvalidInput(std::string("k=") + std::to_string(k) + " out of range for " + which + " set with " +
                       std::to_string(rows) + " rows (need 1 <= k <= rows-1)");
}

inline std::vector<double> radii_of(const RowSet& set, std::size_t k, const PrdcOptions& opt) {
  const std::size_t n = set.rows();
  std::vector<double> radii(n);
  parallel_blocks(n, opt.block_rows, [&](std::size_t lo, std::size_t hi) {
    std::vector<double> buf(n - 1);
    for (std::size_t i = lo; i < hi; ++i) {
      std::size_t w = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) buf[w++] = distance(set, i, set, j);
      std::nth_element(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(k - 1), buf.end());
      radii[i] = buf[k - 1];
    }
  });
  return radii;
}

}  // namespace detail

// |A| x |B| Euclidean distances.
inline Matrix pairwise_distances(const Matrix& a, const Matrix& b) {
  detail::check_same_dims(a, b);
  detail::RowSet ra(a), rb(b);
  Matrix out(a.rows(), b.rows());
  parallel_for(a.rows(), [&](std::size_t i) {
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = distance(ra, i, rb, j);
  });
  return out;
}

// Distance from every row to its k-th nearest other row of the same set.
// Ties are resolved by value only (the k-th order statistic).
inline KnnRadii knn_radii(const Matrix& set, std::size_t k, const PrdcOptions& opt = {}) {
  detail::check_k(k, set.rows(), "the");
  detail::RowSet rs(set);
  return {detail::radii_of(rs, k, opt), k};
}

// A reference set with its k-NN radii computed once, reused for every query batch.
class PrdcReference {
 public:
  PrdcReference() = default;

  PrdcReference(Matrix reference, std::size_t k, PrdcOptions opt = {})
      : ref_(std::move(reference)), k_(k), opt_(opt) {
    validate_embedding(ref_, "reference embeddings");
    detail::check_k(k_, ref_.rows(), "reference");
    detail::RowSet rs(ref_);
    radii_ = detail::radii_of(rs, k_, opt_);
  }

  const Matrix& embeddings() const noexcept { return ref_; }
  std::span<const double> radii() const noexcept { return radii_; }
  std::size_t k() const noexcept { return k_; }
  std::size_t dims() const noexcept { return ref_.cols(); }

  // Query-side radii are taken within `query` itself, so it needs >= k+1 rows.
  PrdcMatrix featurize(const Matrix& query) const {
    validate_embedding(query, "query embeddings");
    detail::check_same_dims(ref_, query);
    detail::check_k(k_, query.rows(), "query");

    detail::RowSet rq(query), rr(ref_);
    const std::vector<double> rquery = detail::radii_of(rq, k_, opt_);
    const std::size_t n = ref_.rows();
    const double nd = static_cast<double>(n);
    const double kn = static_cast<double>(k_) * static_cast<double>(n);

    PrdcMatrix out{Matrix(query.rows(), PrdcMatrix::kColumns), k_};
    parallel_blocks(query.rows(), opt_.block_rows, [&](std::size_t lo, std::size_t hi) {
      std::vector<double> cross((hi - lo) * n);
      for (std::size_t j = lo; j < hi; ++j)
        for (std::size_t i = 0; i < n; ++i) cross[(j - lo) * n + i] = distance(rq, j, rr, i);

      for (std::size_t j = lo; j < hi; ++j) {
        const double* d = cross.data() + (j - lo) * n;
        std::size_t in_ref_balls = 0, refs_in_query_ball = 0;
        double nearest = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
          in_ref_balls += d[i] < radii_[i];
          refs_in_query_ball += d[i] < rquery[j];
          nearest = std::min(nearest, d[i]);
        }
        auto row = out.values.row(j);
        row[PrdcMatrix::kP] = in_ref_balls > 0 ? 1.0 : 0.0;
        row[PrdcMatrix::kR] = static_cast<double>(refs_in_query_ball) / nd;
        row[PrdcMatrix::kD] = static_cast<double>(in_ref_balls) / kn;
        row[PrdcMatrix::kC] = nearest < rquery[j] ? 1.0 : 0.0;
      }
    });
    return out;
  }

 private:
  Matrix ref_;
  std::vector<double> radii_;
  std::size_t k_ = 0;
  PrdcOptions opt_;
};

inline PrdcMatrix compute_prdc(const Matrix& ref, const Matrix& query, std::size_t k, const PrdcOptions& opt = {}) {
  detail::check_same_dims(ref, query);
  return PrdcReference(ref, k, opt).featurize(query);
}

}  // namespace k4
