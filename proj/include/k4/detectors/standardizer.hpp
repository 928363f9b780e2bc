#pragma once

#include <cmath>
#include <vector>

#include "k4/binary_io.hpp"
#include "k4/core.hpp"

namespace k4 {

// Column-wise z-score with population statistics.
struct Standardizer {
  static constexpr double kStdFloor = 1e-8;

  std::vector<double> mean;
  std::vector<double> std;

  static Standardizer fit(const Matrix& train) {
    if (train.rows() < 2) throw InvalidInput("standardizer needs at least 2 rows");
    const std::size_t d = train.cols();
    const double n = static_cast<double>(train.rows());
    Standardizer s{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
    for (std::size_t i = 0; i < train.rows(); ++i)
      for (std::size_t c = 0; c < d; ++c) s.mean[c] += train(i, c);
    for (auto& m : s.mean) m /= n;
    for (std::size_t i = 0; i < train.rows(); ++i)
      for (std::size_t c = 0; c < d; ++c) {
        const double t = train(i, c) - s.mean[c];
        s.std[c] += t * t;
      }
    for (auto& v : s.std) v = std::max(std::sqrt(v / n), kStdFloor);
    return s;
  }

  std::size_t dims() const noexcept { return mean.size(); }

  Matrix apply(const Matrix& x) const {
    check(x);
    Matrix out(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t c = 0; c < x.cols(); ++c) out(i, c) = (x(i, c) - mean[c]) / std[c];
    return out;
  }

  Matrix invert(const Matrix& z) const {
    check(z);
    Matrix out(z.rows(), z.cols());
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t c = 0; c < z.cols(); ++c) out(i, c) = z(i, c) * std[c] + mean[c];
    return out;
  }

  void serialize(ByteWriter& w) const {
    w.u64(mean.size());
    w.f64s(mean);
    w.f64s(std);
  }

  static Standardizer deserialize(ByteReader& r) {
    const auto d = r.count(16);
    Standardizer s;
    s.mean = r.f64s(d);
    s.std = r.f64s(d);
    for (double v : s.std)
      if (!(v >= kStdFloor)) r.fail("standardizer std below floor");
    return s;
  }

  friend bool operator==(const Standardizer&, const Standardizer&) = default;

 private:
  void check(const Matrix& x) const {
    if (x.cols() != mean.size())
      throw InvalidInput("standardizer fitted on " + std::to_string(mean.size()) + " columns, got " +
                         std::to_string(x.cols()));
  }
};

}  // namespace k4
