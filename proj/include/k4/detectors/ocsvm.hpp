#pragma once

// One-class SVM with an RBF kernel, trained by SMO on the dual
//   min 1/2 a^T Q a   s.t.  0 <= a_i <= 1,  sum a_i = nu * n
// using second-order working-set selection. Stored duals are rescaled by
// 1/(nu n) so that sum alpha = 1 and alpha_i <= 1/(nu n).

#include <cmath>
#include <cstdint>
#include <list>
#include <optional>
#include <vector>

#include "k4/binary_io.hpp"
#include "k4/core.hpp"
#include "k4/parallel.hpp"

namespace k4 {

struct OcsvmConfig {
  double nu = 0.1;
  // RBF width; 1 / (dims * mean column variance) when unset.
  std::optional<double> gamma;
  // Stopping tolerance on the maximal KKT violation, in unscaled dual units.
  double tol = 1e-3;
  std::size_t max_iter = 10'000'000;
  std::size_t cache_mb = 256;
};

class OcsvmModel {
 public:
  OcsvmModel() = default;
  OcsvmModel(Matrix support_vectors, std::vector<double> alphas, double rho, double gamma, double nu)
      : sv_(std::move(support_vectors)), alpha_(std::move(alphas)), rho_(rho), gamma_(gamma), nu_(nu) {
    if (sv_.rows() != alpha_.size()) throw InvalidInput("OCSVM support vector / alpha count mismatch");
  }

  const Matrix& support_vectors() const noexcept { return sv_; }
  const std::vector<double>& alphas() const noexcept { return alpha_; }
  double rho() const noexcept { return rho_; }
  double gamma() const noexcept { return gamma_; }
  double nu() const noexcept { return nu_; }
  std::size_t dims() const noexcept { return sv_.cols(); }
  bool converged() const noexcept { return converged_; }
  std::size_t iterations() const noexcept { return iterations_; }

  // sum alpha_i k(sv_i, x) - rho; negative outside the learned support.
  double decision(std::span<const double> x) const {
    const std::size_t d = dims();
    const double* p = sv_.data().data();
    double s = 0.0;
    for (std::size_t i = 0; i < sv_.rows(); ++i, p += d) {
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) sq += (x[j] - p[j]) * (x[j] - p[j]);
      s += alpha_[i] * std::exp(-gamma_ * sq);
    }
    return s - rho_;
  }

  std::vector<double> score(const Matrix& x) const {
    if (x.cols() != dims())
      throw InvalidInput("OCSVM expects " + std::to_string(dims()) + " features, got " + std::to_string(x.cols()));
    std::vector<double> s(x.rows());
    parallel_for(x.rows(), [&](std::size_t i) { s[i] = -decision(x.row(i)); }, 64);
    return s;
  }

  void serialize(ByteWriter& w) const {
    w.f64(rho_);
    w.f64(gamma_);
    w.f64(nu_);
    w.u64(sv_.rows());
    w.u64(sv_.cols());
    w.f64s(alpha_);
    w.f64s(sv_.data());
  }

  static OcsvmModel deserialize(ByteReader& r) {
    const double rho = r.f64(), gamma = r.f64(), nu = r.f64();
    const auto s = r.count(8);
    const auto d = r.count(8);
    if (d == 0) r.fail("OCSVM with zero dimensions");
    auto alpha = r.f64s(s);
    if (s > r.remaining() / 8 / d) r.fail("OCSVM payload shorter than declared");
    Matrix sv(s, d, r.f64s(s * d));
    return OcsvmModel(std::move(sv), std::move(alpha), rho, gamma, nu);
  }

 private:
  friend OcsvmModel fit_ocsvm(const Matrix&, const OcsvmConfig&);

  Matrix sv_;
  std::vector<double> alpha_;
  double rho_ = 0.0;
  double gamma_ = 1.0;
  double nu_ = 0.1;
  bool converged_ = true;
  std::size_t iterations_ = 0;
};

namespace detail {

// LRU cache of kernel columns Q[:, i].
class KernelCache {
 public:
  KernelCache(const Matrix& x, double gamma, std::size_t budget_bytes)
      : x_(x), gamma_(gamma), slot_(x.rows(), entries_.end()) {
    const std::size_t per_col = std::max<std::size_t>(x.rows() * sizeof(double), 1);
    capacity_ = std::max<std::size_t>(budget_bytes / per_col, 2);
  }

  const std::vector<double>& column(std::size_t i) {
    if (auto it = slot_[i]; it != entries_.end()) {
      entries_.splice(entries_.begin(), entries_, it);
      return it->second;
    }
    std::vector<double> col;
    if (entries_.size() >= capacity_) {
      auto& victim = entries_.back();
      slot_[victim.first] = entries_.end();
      col = std::move(victim.second);
      entries_.pop_back();
    }
    col.resize(x_.rows());
    const auto xi = x_.row(i);
    const std::size_t d = x_.cols();
    parallel_blocks(x_.rows(), 4096, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t t = lo; t < hi; ++t) {
        const auto xt = x_.row(t);
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) sq += (xi[j] - xt[j]) * (xi[j] - xt[j]);
        col[t] = std::exp(-gamma_ * sq);
      }
    });
    entries_.emplace_front(i, std::move(col));
    slot_[i] = entries_.begin();
    return entries_.front().second;
  }

 private:
  using Entry = std::pair<std::size_t, std::vector<double>>;
  const Matrix& x_;
  double gamma_;
  std::size_t capacity_ = 2;
  std::list<Entry> entries_;
  std::vector<std::list<Entry>::iterator> slot_;
};

inline double default_gamma(const Matrix& x) {
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
  const double mean_var = total / static_cast<double>(d);
  return mean_var > 0.0 ? 1.0 / (static_cast<double>(d) * mean_var) : 1.0;
}

}  // namespace detail

inline OcsvmModel fit_ocsvm(const Matrix& x, const OcsvmConfig& cfg = {}) {
  if (!(cfg.nu > 0.0 && cfg.nu <= 1.0)) throw InvalidInput("OCSVM nu must lie in (0, 1]");
  if (x.rows() < 2) throw InvalidInput("OCSVM needs at least 2 training rows");
  validate_embedding(x, "OCSVM training features");
  const double gamma = cfg.gamma ? *cfg.gamma : detail::default_gamma(x);
  if (!(gamma > 0.0)) throw InvalidInput("OCSVM gamma must be positive");

  const std::size_t n = x.rows();
  constexpr double C = 1.0;
  constexpr double kTau = 1e-12;
  const double total = cfg.nu * static_cast<double>(n);

  std::vector<double> alpha(n, 0.0);
  {
    const auto full = static_cast<std::size_t>(total);
    for (std::size_t i = 0; i < full && i < n; ++i) alpha[i] = C;
    if (full < n) alpha[full] = total - static_cast<double>(full);
  }

  detail::KernelCache cache(x, gamma, cfg.cache_mb << 20);
  std::vector<double> grad(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (alpha[i] == 0.0) continue;
    const auto& qi = cache.column(i);
    for (std::size_t t = 0; t < n; ++t) grad[t] += alpha[i] * qi[t];
  }

  bool converged = false;
  std::size_t iter = 0;
  for (; iter < cfg.max_iter; ++iter) {
    // i maximizes -G over indices that can grow.
    double gmax = -std::numeric_limits<double>::infinity();
    std::ptrdiff_t i = -1;
    for (std::size_t t = 0; t < n; ++t)
      if (alpha[t] < C && -grad[t] >= gmax) {
        gmax = -grad[t];
        i = static_cast<std::ptrdiff_t>(t);
      }
    if (i < 0) {
      converged = true;
      break;
    }
    const auto& qi = cache.column(static_cast<std::size_t>(i));

    // j maximizes the second-order decrease among indices that can shrink.
    double gmax2 = -std::numeric_limits<double>::infinity();
    double obj_min = std::numeric_limits<double>::infinity();
    std::ptrdiff_t j = -1;
    for (std::size_t t = 0; t < n; ++t) {
      if (alpha[t] <= 0.0) continue;
      const double grad_diff = gmax + grad[t];
      gmax2 = std::max(gmax2, grad[t]);
      if (grad_diff > 0.0) {
        double quad = 2.0 - 2.0 * qi[t];
        if (quad <= 0.0) quad = kTau;
        const double obj = -(grad_diff * grad_diff) / quad;
        if (obj <= obj_min) {
          obj_min = obj;
          j = static_cast<std::ptrdiff_t>(t);
        }
      }
    }
    if (gmax + gmax2 < cfg.tol || j < 0) {
      converged = true;
      break;
    }

    const auto ui = static_cast<std::size_t>(i), uj = static_cast<std::size_t>(j);
    // Copy: fetching column j may evict column i.
    const std::vector<double> col_i = qi;
    const auto& qj = cache.column(uj);

    const double old_ai = alpha[ui], old_aj = alpha[uj];
    double quad = 2.0 - 2.0 * col_i[uj];
    if (quad <= 0.0) quad = kTau;
    const double delta = (grad[ui] - grad[uj]) / quad;
    const double sum = old_ai + old_aj;
    double ai = old_ai - delta, aj = old_aj + delta;
    if (sum > C) {
      if (ai > C) {
        ai = C;
        aj = sum - C;
      }
    } else if (aj < 0.0) {
      aj = 0.0;
      ai = sum;
    }
    if (sum > C) {
      if (aj > C) {
        aj = C;
        ai = sum - C;
      }
    } else if (ai < 0.0) {
      ai = 0.0;
      aj = sum;
    }
    alpha[ui] = ai;
    alpha[uj] = aj;

    const double dai = ai - old_ai, daj = aj - old_aj;
    for (std::size_t t = 0; t < n; ++t) grad[t] += col_i[t] * dai + qj[t] * daj;
  }

  // rho: mean gradient over free duals, else midpoint of the feasible interval.
  double ub = std::numeric_limits<double>::infinity(), lb = -std::numeric_limits<double>::infinity();
  double sum_free = 0.0;
  std::size_t n_free = 0;
  for (std::size_t t = 0; t < n; ++t) {
    if (alpha[t] >= C)
      lb = std::max(lb, grad[t]);
    else if (alpha[t] <= 0.0)
      ub = std::min(ub, grad[t]);
    else {
      ++n_free;
      sum_free += grad[t];
    }
  }
  const double rho = n_free > 0 ? sum_free / static_cast<double>(n_free) : (ub + lb) / 2.0;

  std::vector<std::size_t> sv_idx;
  for (std::size_t t = 0; t < n; ++t)
    if (alpha[t] > 0.0) sv_idx.push_back(t);
  std::vector<double> sv_alpha;
  sv_alpha.reserve(sv_idx.size());
  for (auto t : sv_idx) sv_alpha.push_back(alpha[t] / total);

  OcsvmModel model(x.select_rows(sv_idx), std::move(sv_alpha), rho / total, gamma, cfg.nu);
  model.converged_ = converged;
  model.iterations_ = iter;
  return model;
}

}  // namespace k4
