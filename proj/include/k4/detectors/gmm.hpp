#pragma once

// Full-covariance Gaussian mixture fitted by EM. Anomaly score is the
// negative log-density under the mixture.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "k4/binary_io.hpp"
#include "k4/core.hpp"
#include "k4/detectors/linalg.hpp"
#include "k4/parallel.hpp"
#include "k4/rng.hpp"

namespace k4 {

struct GmmConfig {
  std::size_t n_components = 4;
  double reg = 1e-6;
  std::size_t max_iter = 200;
  double tol = 1e-4;
  std::uint64_t seed = 0;
};

class GmmModel {
 public:
  GmmModel() = default;

  GmmModel(std::vector<double> weights, Matrix means, std::vector<Matrix> covariances)
      : weights_(std::move(weights)), means_(std::move(means)), covs_(std::move(covariances)) {
    factorize();
  }

  std::size_t n_components() const noexcept { return weights_.size(); }
  std::size_t dims() const noexcept { return means_.cols(); }
  const std::vector<double>& weights() const noexcept { return weights_; }
  const Matrix& means() const noexcept { return means_; }
  const std::vector<Matrix>& covariances() const noexcept { return covs_; }

  // Mean log-likelihood per sample after each EM step (initial parameters first).
  const std::vector<double>& log_likelihood_trace() const noexcept { return trace_; }
  bool converged() const noexcept { return converged_; }
  std::size_t reinitialized_components() const noexcept { return reinitialized_; }

  // log(w_c) + log N(x; mu_c, Sigma_c) for every component. scratch holds 2*dims.
  void component_log_probs(std::span<const double> x, std::span<double> out, std::span<double> scratch) const {
    const std::size_t d = dims();
    auto diff = scratch.subspan(d, d);
    for (std::size_t c = 0; c < n_components(); ++c) {
      for (std::size_t j = 0; j < d; ++j) diff[j] = x[j] - means_(c, j);
      const double m = linalg::mahalanobis_sq(chol_[c], diff, scratch.first(d));
      out[c] = log_weights_[c] - 0.5 * (static_cast<double>(d) * linalg::kLog2Pi + log_dets_[c] + m);
    }
  }

  double log_density(std::span<const double> x) const {
    std::vector<double> lp(n_components()), scratch(2 * dims());
    component_log_probs(x, lp, scratch);
    return linalg::log_sum_exp(lp);
  }

  // Posterior component probabilities for each row.
  Matrix responsibilities(const Matrix& x) const {
    check_dims(x);
    Matrix r(x.rows(), n_components());
    std::vector<double> lp(n_components()), scratch(2 * dims());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      component_log_probs(x.row(i), lp, scratch);
      const double lse = linalg::log_sum_exp(lp);
      for (std::size_t c = 0; c < n_components(); ++c) r(i, c) = std::exp(lp[c] - lse);
    }
    return r;
  }

  std::vector<double> score(const Matrix& x) const {
    check_dims(x);
    std::vector<double> s(x.rows());
    parallel_for(x.rows(), [&](std::size_t i) { s[i] = -log_density(x.row(i)); }, 256);
    return s;
  }

  void serialize(ByteWriter& w) const {
    w.u64(n_components());
    w.u64(dims());
    w.f64s(weights_);
    w.f64s(means_.data());
    for (const auto& c : covs_) w.f64s(c.data());
  }

  static GmmModel deserialize(ByteReader& r) {
    const auto k = r.count(8);
    const auto d = r.count(8);
    if (k == 0 || d == 0) r.fail("empty mixture");
    auto weights = r.f64s(k);
    Matrix means(k, d, r.f64s(k * d));
    std::vector<Matrix> covs;
    for (std::size_t c = 0; c < k; ++c) covs.emplace_back(d, d, r.f64s(d * d));
    return GmmModel(std::move(weights), std::move(means), std::move(covs));
  }

 private:
  friend GmmModel fit_gmm(const Matrix&, const GmmConfig&);

  void check_dims(const Matrix& x) const {
    if (x.cols() != dims())
      throw InvalidInput("GMM expects " + std::to_string(dims()) + " features, got " + std::to_string(x.cols()));
  }

  void factorize() {
    chol_.clear();
    log_dets_.clear();
    log_weights_.clear();
    for (auto& cov : covs_) {
      auto l = linalg::cholesky(cov);
      // Escalating jitter for covariances that lost definiteness to rounding.
      for (double jitter = 1e-10; !l && jitter < 1.0; jitter *= 10.0) {
        for (std::size_t j = 0; j < cov.rows(); ++j) cov(j, j) += jitter;
        l = linalg::cholesky(cov);
      }
      if (!l) throw InvalidInput("GMM covariance is not positive definite");
      log_dets_.push_back(linalg::log_det_from_cholesky(*l));
      chol_.push_back(std::move(*l));
    }
    for (double w : weights_) log_weights_.push_back(std::log(w));
  }

  std::vector<double> weights_;
  Matrix means_;
  std::vector<Matrix> covs_;
  std::vector<Matrix> chol_;
  std::vector<double> log_dets_;
  std::vector<double> log_weights_;
  std::vector<double> trace_;
  bool converged_ = false;
  std::size_t reinitialized_ = 0;
};

namespace detail {

inline Matrix data_covariance(const Matrix& x, double reg) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> mu(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += x(i, j);
  for (auto& m : mu) m /= static_cast<double>(n);
  Matrix cov(d, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = 0; b < d; ++b) cov(a, b) += (x(i, a) - mu[a]) * (x(i, b) - mu[b]);
  for (auto& v : cov.data()) v /= static_cast<double>(n);
  for (std::size_t j = 0; j < d; ++j) cov(j, j) += reg;
  return cov;
}

// k-means++ seeding: first center uniform, then proportional to squared distance.
inline std::vector<std::size_t> kmeanspp(const Matrix& x, std::size_t k, Rng& rng) {
  const std::size_t n = x.rows();
  std::vector<std::size_t> centers{static_cast<std::size_t>(rng.below(n))};
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  while (centers.size() < k) {
    const auto last = x.row(centers.back());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < x.cols(); ++j) s += (x(i, j) - last[j]) * (x(i, j) - last[j]);
      d2[i] = std::min(d2[i], s);
      total += d2[i];
    }
    std::size_t pick = static_cast<std::size_t>(rng.below(n));
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        u -= d2[i];
        if (u < 0.0 || i + 1 == n) {
          pick = i;
          break;
        }
      }
    }
    centers.push_back(pick);
  }
  return centers;
}

}  // namespace detail

inline GmmModel fit_gmm(const Matrix& x, const GmmConfig& cfg = {}) {
  const std::size_t n = x.rows(), d = x.cols(), k = cfg.n_components;
  if (k < 1) throw InvalidInput("GMM needs at least one component");
  if (n < k) throw InvalidInput("GMM needs at least n_components rows");
  if (d < 1) throw InvalidInput("GMM needs at least one feature");
  validate_embedding(x, "GMM training features");

  Rng rng = Rng::derive(cfg.seed, 0x676d6d);
  const Matrix global_cov = detail::data_covariance(x, cfg.reg);

  // Hard assignment to the nearest seeded center gives the initial responsibilities.
  Matrix resp(n, k);
  {
    const auto centers = detail::kmeanspp(x, k, rng);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += (x(i, j) - x(centers[c], j)) * (x(i, j) - x(centers[c], j));
        if (s < best_d) {
          best_d = s;
          best = c;
        }
      }
      resp(i, best) = 1.0;
    }
  }

  std::size_t reinitialized = 0;
  auto m_step = [&]() {
    std::vector<double> nk(k, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < k; ++c) nk[c] += resp(i, c);
    std::vector<double> weights(k);
    Matrix means(k, d);
    std::vector<Matrix> covs(k, Matrix(d, d));
    for (std::size_t c = 0; c < k; ++c) {
      if (nk[c] < 1e-10) {
        // Collapsed component: restart it on a random training point.
        ++reinitialized;
        const auto p = x.row(rng.below(n));
        std::copy(p.begin(), p.end(), means.row(c).begin());
        covs[c] = global_cov;
        weights[c] = 1.0 / static_cast<double>(n);
        continue;
      }
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) means(c, j) += resp(i, c) * x(i, j);
      for (std::size_t j = 0; j < d; ++j) means(c, j) /= nk[c];
      for (std::size_t i = 0; i < n; ++i) {
        const double r = resp(i, c);
        if (r == 0.0) continue;
        for (std::size_t a = 0; a < d; ++a) {
          const double da = x(i, a) - means(c, a);
          for (std::size_t b = 0; b <= a; ++b) covs[c](a, b) += r * da * (x(i, b) - means(c, b));
        }
      }
      for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = 0; b <= a; ++b) {
          covs[c](a, b) /= nk[c];
          covs[c](b, a) = covs[c](a, b);
        }
        covs[c](a, a) += cfg.reg;
      }
      weights[c] = nk[c] / static_cast<double>(n);
    }
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    for (double& w : weights) w /= wsum;
    return GmmModel(std::move(weights), std::move(means), std::move(covs));
  };

  // E-step on `model`: fills resp, returns mean log-likelihood.
  auto e_step = [&](const GmmModel& model) {
    std::vector<double> lp(k), scratch(2 * d);
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      model.component_log_probs(x.row(i), lp, scratch);
      const double lse = linalg::log_sum_exp(lp);
      ll += lse;
      for (std::size_t c = 0; c < k; ++c) resp(i, c) = std::exp(lp[c] - lse);
    }
    return ll / static_cast<double>(n);
  };

  GmmModel model = m_step();
  std::vector<double> trace{e_step(model)};
  bool converged = false;
  for (std::size_t it = 0; it < cfg.max_iter; ++it) {
    model = m_step();
    const double ll = e_step(model);
    if (!std::isfinite(ll)) throw InvalidInput("GMM log-likelihood became non-finite");
    trace.push_back(ll);
    if (std::abs(ll - trace[trace.size() - 2]) < cfg.tol) {
      converged = true;
      break;
    }
  }
  model.trace_ = std::move(trace);
  model.converged_ = converged;
  model.reinitialized_ = reinitialized;
  return model;
}

}  // namespace k4
