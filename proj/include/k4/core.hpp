#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace k4 {

// Rejected caller input: shape mismatch, out-of-range parameter, empty set.
struct InvalidInput : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed on-disk artifact (bad magic, version, length, payload).
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Metric not defined for the given labels (e.g. single-class input).
struct UndefinedMetric : std::domain_error {
  using std::domain_error::domain_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_)
      throw InvalidInput("matrix data size " + std::to_string(data_.size()) +
                         " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix m;
    m.rows_ = rows.size();
    m.cols_ = rows.size() ? rows.begin()->size() : 0;
    m.data_.reserve(m.rows_ * m.cols_);
    for (const auto& r : rows) {
      if (r.size() != m.cols_) throw InvalidInput("ragged row list");
      m.data_.insert(m.data_.end(), r.begin(), r.end());
    }
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return rows_ == 0; }

  double& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const noexcept { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) noexcept { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const noexcept { return {data_.data() + i * cols_, cols_}; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  // Rows selected by index, in the given order.
  Matrix select_rows(std::span<const std::size_t> idx) const {
    Matrix out(idx.size(), cols_);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] >= rows_) throw InvalidInput("row index out of range");
      std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(idx[r] * cols_), cols_,
                  out.data_.begin() + static_cast<std::ptrdiff_t>(r * cols_));
    }
    return out;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Embedding matrices must be non-empty and finite.
inline void validate_embedding(const Matrix& m, const char* what = "embedding matrix") {
  if (m.rows() < 1 || m.cols() < 1)
    throw InvalidInput(std::string(what) + " must have at least one row and one column");
  for (double v : m.data())
    if (!std::isfinite(v)) throw InvalidInput(std::string(what) + " contains a non-finite value");
}

// 1-based nearest rank ceil(q*n), clamped to [1, n]. The small offset keeps
// products like 0.7*10 = 7.000000000000001 from rounding up a rank.
inline std::size_t nearest_rank_index(double q, std::size_t n) {
  const double r = std::ceil(q * static_cast<double>(n) - 1e-9);
  if (!(r >= 1.0)) return 1;
  return std::min(n, static_cast<std::size_t>(r));
}

// Nearest-rank quantile: the ceil(q*n)-th smallest value, q in (0,1].
inline double nearest_rank(std::vector<double> values, double q) {
  if (values.empty()) throw InvalidInput("nearest_rank on empty input");
  const auto rank = nearest_rank_index(q, values.size());
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(rank - 1), values.end());
  return values[rank - 1];
}

}  // namespace k4
