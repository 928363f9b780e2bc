#pragma once

// Small dense helpers for the d x d covariance work in the density models.

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "k4/core.hpp"

namespace k4::linalg {

// Lower-triangular Cholesky factor of a symmetric matrix, or nullopt if not PD.
inline std::optional<Matrix> cholesky(const Matrix& a) {
  const std::size_t d = a.rows();
  Matrix l(d, d);
  for (std::size_t j = 0; j < d; ++j) {
    double diag = a(j, j);
    for (std::size_t p = 0; p < j; ++p) diag -= l(j, p) * l(j, p);
    if (!(diag > 0.0) || !std::isfinite(diag)) return std::nullopt;
    l(j, j) = std::sqrt(diag);
    for (std::size_t i = j + 1; i < d; ++i) {
      double s = a(i, j);
      for (std::size_t p = 0; p < j; ++p) s -= l(i, p) * l(j, p);
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

// Squared Mahalanobis norm ||L^{-1} v||^2 by forward substitution.
inline double mahalanobis_sq(const Matrix& l, std::span<const double> v, std::span<double> scratch) {
  const std::size_t d = l.rows();
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    double t = v[i];
    for (std::size_t p = 0; p < i; ++p) t -= l(i, p) * scratch[p];
    scratch[i] = t / l(i, i);
    s += scratch[i] * scratch[i];
  }
  return s;
}

inline double log_det_from_cholesky(const Matrix& l) {
  double s = 0.0;
  for (std::size_t i = 0; i < l.rows(); ++i) s += std::log(l(i, i));
  return 2.0 * s;
}

inline double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // ln(2*pi)

}  // namespace k4::linalg
