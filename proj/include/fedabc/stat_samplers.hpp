#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "fedabc/error.hpp"
#include "fedabc/linalg.hpp"
#include "fedabc/rng.hpp"

namespace fedabc {

/// Dirichlet concentration, one entry per mixture component.
struct DirichletAlpha {
  Vector alpha;

  static DirichletAlpha uniform(int k, double value = 1.0) { return {Vector::Constant(k, value)}; }

  void validate() const {
    if (alpha.size() < 1) throw InvalidHyperparameter("Dirichlet alpha must have at least one entry");
    for (Eigen::Index i = 0; i < alpha.size(); ++i) {
      if (!(alpha(i) > 0.0) || !std::isfinite(alpha(i))) {
        throw InvalidHyperparameter("Dirichlet alpha[" + std::to_string(i) + "] must be positive");
      }
    }
  }
};

/// Normal-Inverse-Wishart hyperparameters: Sigma ~ IW(nu, psi), mu ~ N(m, Sigma / kappa).
struct NiwHyper {
  Vector m;
  double kappa = 1.0;
  Matrix psi;
  double nu = 0.0;

  Eigen::Index dim() const { return m.size(); }

  /// Weakly-informative default: m = 0, kappa = 1, psi = I, nu = d + 2.
  static NiwHyper standard(int d) {
    return {Vector::Zero(d), 1.0, Matrix::Identity(d, d), static_cast<double>(d) + 2.0};
  }

  void validate() const {
    const auto d = dim();
    if (d < 1) throw InvalidHyperparameter("NIW location must have dimension >= 1");
    if (psi.rows() != d || psi.cols() != d) throw ShapeError("NIW psi must be d x d");
    if (!(kappa > 0.0)) throw InvalidHyperparameter("NIW kappa must be positive");
    if (!(nu > static_cast<double>(d) - 1.0)) throw InvalidHyperparameter("NIW nu must exceed d - 1");
    cholesky(psi, "NIW psi");
  }
};

inline Vector sample_dirichlet(const DirichletAlpha& a, Rng& rng) {
  a.validate();
  const auto k = a.alpha.size();
  Vector g(k);
  for (Eigen::Index i = 0; i < k; ++i) g(i) = rng.gamma(a.alpha(i));
  double total = g.sum();
  if (!(total > 0.0)) {
    // Every gamma underflowed (tiny alphas): all mass on the largest draw.
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < k; ++i) {
      if (a.alpha(i) > a.alpha(best)) best = i;
    }
    g.setZero();
    g(best) = 1.0;
    total = 1.0;
  }
  return g / total;
}

/// n rows of N(m, sigma).
inline Matrix sample_mvn(const Vector& m, const Matrix& sigma, Eigen::Index n, Rng& rng) {
  if (sigma.rows() != m.size()) throw ShapeError("MVN covariance does not match mean dimension");
  const auto llt = cholesky(sigma, "MVN covariance");
  const Matrix l = llt.matrixL();
  const auto d = m.size();
  Matrix out(n, d);
  Vector z(d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index k = 0; k < d; ++k) z(k) = rng.normal();
    out.row(i) = (m + l * z).transpose();
  }
  return out;
}

/// Wishart(nu, scale) via the Bartlett decomposition; nu may be any real > d - 1.
inline Matrix sample_wishart(double nu, const Matrix& scale, Rng& rng) {
  const auto d = scale.rows();
  if (!(nu > static_cast<double>(d) - 1.0)) throw InvalidHyperparameter("Wishart nu must exceed d - 1");
  const Matrix l = cholesky(scale, "Wishart scale").matrixL();
  Matrix a = Matrix::Zero(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    a(i, i) = std::sqrt(rng.chi_square(nu - static_cast<double>(i)));
    for (Eigen::Index j = 0; j < i; ++j) a(i, j) = rng.normal();
  }
  const Matrix la = l * a;
  return la * la.transpose();
}

/// Inverse-Wishart(nu, psi): the inverse of a Wishart(nu, psi^-1) draw.
inline Matrix sample_inverse_wishart(double nu, const Matrix& psi, Rng& rng) {
  const auto d = psi.rows();
  if (psi.cols() != d || d == 0) throw ShapeError("inverse-Wishart scale must be square");
  if (!(nu > static_cast<double>(d) - 1.0)) {
    throw InvalidHyperparameter("inverse-Wishart nu must exceed d - 1");
  }
  const auto psi_llt = cholesky(psi, "inverse-Wishart scale");
  const Matrix psi_inv = psi_llt.solve(Matrix::Identity(d, d));
  const Matrix w = sample_wishart(nu, 0.5 * (psi_inv + psi_inv.transpose()), rng);
  Eigen::LLT<Matrix> w_llt(w);
  if (w_llt.info() != Eigen::Success) throw NotPositiveDefinite("Wishart draw is singular");
  Matrix sigma = w_llt.solve(Matrix::Identity(d, d));
  return 0.5 * (sigma + sigma.transpose());
}

struct NiwDraw {
  Vector mu;
  Matrix sigma;
};

/// Sigma first, then mu | Sigma.
inline NiwDraw sample_niw(const NiwHyper& h, Rng& rng) {
  h.validate();
  Matrix sigma = sample_inverse_wishart(h.nu, h.psi, rng);
  Vector mu = sample_mvn(h.m, sigma / h.kappa, 1, rng).row(0).transpose();
  return {std::move(mu), std::move(sigma)};
}

}  // namespace fedabc
