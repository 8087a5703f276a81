#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedabc/error.hpp"
#include "fedabc/linalg.hpp"
#include "fedabc/rng.hpp"
#include "fedabc/stat_samplers.hpp"

namespace fedabc {

/// Mixture weights, component means and covariances.
struct GmmParams {
  Vector pi;
  std::vector<Vector> mu;
  std::vector<Matrix> sigma;

  int components() const { return static_cast<int>(pi.size()); }
  Eigen::Index dim() const { return mu.empty() ? 0 : mu.front().size(); }

  void validate() const {
    const auto k = pi.size();
    if (k < 1) throw ShapeError("GMM needs at least one component");
    if (static_cast<Eigen::Index>(mu.size()) != k || static_cast<Eigen::Index>(sigma.size()) != k) {
      throw ShapeError("GMM weight/mean/covariance counts differ");
    }
    double total = 0.0;
    for (Eigen::Index i = 0; i < k; ++i) {
      if (!(pi(i) >= 0.0 && pi(i) <= 1.0)) throw InvalidHyperparameter("GMM weight outside [0, 1]");
      total += pi(i);
    }
    if (std::abs(total - 1.0) > 1e-9) throw InvalidHyperparameter("GMM weights do not sum to 1");
    const auto d = dim();
    for (std::size_t c = 0; c < mu.size(); ++c) {
      if (mu[c].size() != d || sigma[c].rows() != d || sigma[c].cols() != d) {
        throw ShapeError("GMM components disagree on dimension");
      }
      cholesky(sigma[c], "GMM component covariance");
    }
  }

  friend bool operator==(const GmmParams& a, const GmmParams& b) {
    if (a.pi.size() != b.pi.size() || a.pi != b.pi || a.mu.size() != b.mu.size()) return false;
    for (std::size_t i = 0; i < a.mu.size(); ++i) {
      if (a.mu[i] != b.mu[i] || a.sigma[i] != b.sigma[i]) return false;
    }
    return true;
  }
};

inline nlohmann::json to_json_value(const GmmParams& p) {
  nlohmann::json j;
  j["pi"] = to_json_value(p.pi);
  j["mu"] = nlohmann::json::array();
  j["sigma"] = nlohmann::json::array();
  for (std::size_t k = 0; k < p.mu.size(); ++k) {
    j["mu"].push_back(to_json_value(p.mu[k]));
    j["sigma"].push_back(to_json_value(p.sigma[k]));
  }
  return j;
}

inline GmmParams gmm_from_json(const nlohmann::json& j) {
  GmmParams p;
  p.pi = vector_from_json(j.at("pi"));
  for (const auto& m : j.at("mu")) p.mu.push_back(vector_from_json(m));
  for (const auto& s : j.at("sigma")) p.sigma.push_back(matrix_from_json(s));
  return p;
}

namespace detail {

/// Per-component constants for repeated log-pdf evaluation.
struct ComponentCache {
  Matrix chol_l;
  double log_norm = 0.0;  // log(pi) - d/2 log(2 pi) - 1/2 log|Sigma|
};

inline std::vector<ComponentCache> build_cache(const GmmParams& p) {
  std::vector<ComponentCache> cache(p.mu.size());
  const double d = static_cast<double>(p.dim());
  for (std::size_t k = 0; k < p.mu.size(); ++k) {
    const auto llt = cholesky(p.sigma[k], "GMM component covariance");
    cache[k].chol_l = llt.matrixL();
    const double log_det = 2.0 * cache[k].chol_l.diagonal().array().log().sum();
    const double w = p.pi(static_cast<Eigen::Index>(k));
    cache[k].log_norm = (w > 0.0 ? std::log(w) : -std::numeric_limits<double>::infinity()) -
                        0.5 * d * std::log(2.0 * std::numbers::pi) - 0.5 * log_det;
  }
  return cache;
}

template <class Row>
double component_log_weighted_pdf(const ComponentCache& c, const Vector& mean, const Row& x) {
  if (c.log_norm == -std::numeric_limits<double>::infinity()) return c.log_norm;
  const Vector diff = x.transpose() - mean;
  const Vector z = c.chol_l.triangularView<Eigen::Lower>().solve(diff);
  return c.log_norm - 0.5 * z.squaredNorm();
}

inline double log_sum_exp(const std::vector<double>& v) {
  const double hi = *std::max_element(v.begin(), v.end());
  if (hi == -std::numeric_limits<double>::infinity()) return hi;
  double s = 0.0;
  for (double x : v) s += std::exp(x - hi);
  return hi + std::log(s);
}

}  // namespace detail

/// log p(x) = log sum_k pi_k N(x | mu_k, Sigma_k)
inline double gmm_log_density(const GmmParams& p, const Vector& x) {
  if (x.size() != p.dim()) throw ShapeError("point dimension does not match GMM dimension");
  const auto cache = detail::build_cache(p);
  std::vector<double> terms(cache.size());
  for (std::size_t k = 0; k < cache.size(); ++k) {
    terms[k] = detail::component_log_weighted_pdf(cache[k], p.mu[k], x.transpose());
  }
  return detail::log_sum_exp(terms);
}

inline double gmm_density(const GmmParams& p, const Vector& x) { return std::exp(gmm_log_density(p, x)); }

struct GmmSample {
  Matrix rows;
  std::vector<int> assignment;  // component index per row
};

/// Ancestral sampling: z ~ Categorical(pi), then x ~ N(mu_z, Sigma_z).
inline GmmSample sample_gmm(const GmmParams& p, Eigen::Index n, Rng& rng) {
  const auto k = p.components();
  const auto d = p.dim();
  std::vector<Matrix> chol(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) chol[c] = cholesky(p.sigma[c], "GMM component covariance").matrixL();
  std::vector<double> cumulative(static_cast<std::size_t>(k));
  double acc = 0.0;
  int last_positive = 0;
  for (int c = 0; c < k; ++c) {
    acc += p.pi(c);
    cumulative[c] = acc;
    if (p.pi(c) > 0.0) last_positive = c;
  }

  GmmSample out{Matrix(n, d), std::vector<int>(static_cast<std::size_t>(n))};
  Vector z(d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double u = rng.uniform() * acc;
    int comp = last_positive;
    for (int c = 0; c < k; ++c) {
      if (u < cumulative[c] && p.pi(c) > 0.0) {
        comp = c;
        break;
      }
    }
    for (Eigen::Index j = 0; j < d; ++j) z(j) = rng.normal();
    out.rows.row(i) = (p.mu[comp] + chol[comp] * z).transpose();
    out.assignment[static_cast<std::size_t>(i)] = comp;
  }
  return out;
}

struct EmOptions {
  double tol = 1e-6;
  int max_iter = 500;
};

struct EmFit {
  GmmParams params;
  std::vector<double> mean_log_likelihood;  // one entry per E-step
  int iterations = 0;
  bool converged = false;
  int ridge_events = 0;
};

namespace detail {

/// Adds 1e-6 * trace/d * I (escalating tenfold) until the matrix factorizes.
/// A collapsed trace (below 1e-12 of `fallback_scale`) uses `fallback_scale`.
inline Matrix ridge_until_pd(Matrix s, int& events, double fallback_scale = 1.0) {
  const auto d = s.rows();
  s = 0.5 * (s + s.transpose());
  if (is_positive_definite(s)) return s;
  double base = s.trace() / static_cast<double>(d);
  if (!(fallback_scale > 0.0) || !std::isfinite(fallback_scale)) fallback_scale = 1.0;
  if (!(base > 1e-12 * fallback_scale) || !std::isfinite(base)) base = fallback_scale;
  double ridge = 1e-6 * base;
  for (int attempt = 0; attempt < 40; ++attempt) {
    ++events;
    Matrix t = s + ridge * Matrix::Identity(d, d);
    if (is_positive_definite(t)) return t;
    ridge *= 10.0;
  }
  throw NumericError("covariance could not be regularized");
}

}  // namespace detail

/// Maximum-likelihood GMM by EM with k-means++ seeded means, uniform weights
/// and the pooled covariance as the starting point.
inline EmFit fit_gmm_em(const Matrix& data, int k, Rng& rng, EmOptions opt = {}) {
  const auto n = data.rows();
  const auto d = data.cols();
  if (k < 1) throw InvalidHyperparameter("EM needs at least one component");
  if (n < k) throw InsufficientData("EM needs at least as many rows as components");
  if (!data.allFinite()) throw NumericError("EM input contains non-finite values");

  EmFit fit;
  GmmParams& p = fit.params;
  const Vector mean = data.colwise().mean().transpose();
  const Matrix centered = data.rowwise() - mean.transpose();
  const Matrix raw_pooled = (centered.transpose() * centered) / static_cast<double>(n);
  const double data_scale = raw_pooled.trace() / static_cast<double>(d);
  const Matrix pooled = detail::ridge_until_pd(raw_pooled, fit.ridge_events, data_scale);

  // k-means++ seeding
  std::vector<Eigen::Index> chosen{static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(n)))};
  Vector dist2 = (data.rowwise() - data.row(chosen[0])).rowwise().squaredNorm();
  while (static_cast<int>(chosen.size()) < k) {
    const double total = dist2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        u -= dist2(i);
        if (u < 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(n)));
    }
    chosen.push_back(pick);
    dist2 = dist2.cwiseMin((data.rowwise() - data.row(pick)).rowwise().squaredNorm());
  }
  p.pi = Vector::Constant(k, 1.0 / k);
  for (int c = 0; c < k; ++c) {
    p.mu.push_back(data.row(chosen[static_cast<std::size_t>(c)]).transpose());
    p.sigma.push_back(pooled);
  }

  Matrix resp(n, k);
  std::vector<double> terms(static_cast<std::size_t>(k));
  double prev = -std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < opt.max_iter; ++iter) {
    // E-step
    const auto cache = detail::build_cache(p);
    double ll = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int c = 0; c < k; ++c) {
        terms[c] = detail::component_log_weighted_pdf(cache[c], p.mu[c], data.row(i));
      }
      const double lse = detail::log_sum_exp(terms);
      ll += lse;
      for (int c = 0; c < k; ++c) resp(i, c) = std::exp(terms[c] - lse);
    }
    ll /= static_cast<double>(n);
    fit.mean_log_likelihood.push_back(ll);
    fit.iterations = iter + 1;
    if (iter > 0 && std::abs(ll - prev) < opt.tol) {
      fit.converged = true;
      break;
    }
    prev = ll;

    // M-step (biased covariance)
    for (int c = 0; c < k; ++c) {
      const double nk = resp.col(c).sum();
      p.pi(c) = nk / static_cast<double>(n);
      if (nk <= 1e-10) continue;  // empty component keeps its shape
      const Vector w = resp.col(c);
      Vector mu = (data.transpose() * w) / nk;
      const Matrix diff = data.rowwise() - mu.transpose();
      Matrix cov = (diff.transpose() * w.asDiagonal() * diff) / nk;
      p.mu[c] = std::move(mu);
      p.sigma[c] = detail::ridge_until_pd(std::move(cov), fit.ridge_events, data_scale);
    }
    p.pi /= p.pi.sum();
  }
  return fit;
}

}  // namespace fedabc
