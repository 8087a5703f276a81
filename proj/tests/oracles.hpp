#pragma once

// Independent reference computations used by the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <vector>

#include "fedabc/moae.hpp"
#include "fedabc/rng.hpp"

namespace fedabc::oracle {

/// Central finite-difference check of moae_gradient; returns the largest
/// relative error |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline double max_gradient_relative_error(MoaeModel model, const Matrix& x, const std::vector<int>& y,
                                          LossWeights w, double step = 1e-5, double floor = 1e-6) {
  const auto f = forward(model, x);
  const LayerSet g = moae_gradient(model, f, x, y, w);
  auto loss = [&] {
    const auto ff = forward(model, x);
    return moae_loss(ff.recon, x, ff.prob, y, w);
  };
  double worst = 0.0;
  auto check = [&](double& param, double analytic) {
    const double saved = param;
    param = saved + step;
    const double up = loss();
    param = saved - step;
    const double down = loss();
    param = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(analytic - numeric) / denom);
  };
  for (std::size_t l = 0; l < kLayerCount; ++l) {
    auto& layer = model.layers[l];
    for (Eigen::Index r = 0; r < layer.w.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.w.cols(); ++c) check(layer.w(r, c), g[l].w(r, c));
    for (Eigen::Index r = 0; r < layer.b.size(); ++r) check(layer.b(r), g[l].b(r));
  }
  return worst;
}

/// A small model with random weights and biases (biases nonzero so every path
/// is exercised).
inline MoaeModel random_small_model(int input_dim, int latent_dim, Rng& rng) {
  MoaeModel m = zero_model({input_dim, latent_dim, 5, 4});
  for (auto& layer : m.layers) {
    for (Eigen::Index i = 0; i < layer.w.size(); ++i) layer.w.data()[i] = 0.7 * rng.normal();
    for (Eigen::Index i = 0; i < layer.b.size(); ++i) layer.b(i) = 0.3 * rng.normal();
  }
  return m;
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Matrix x(rows, cols);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  return x;
}

inline std::vector<int> random_labels(std::size_t n, Rng& rng) {
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng.index(2));
  return y;
}

/// Linearly separable 2-D points: label by the sign of x0 + x1, keeping only
/// points at least 1 away from the boundary (total margin 2).
inline void separable_fixture(int n, Rng& rng, Matrix& x, std::vector<int>& y) {
  x.resize(n, 2);
  y.assign(static_cast<std::size_t>(n), 0);
  int i = 0;
  while (i < n) {
    const double a = 2.0 * rng.normal(), b = 2.0 * rng.normal();
    const double s = (a + b) / std::sqrt(2.0);
    if (std::abs(s) < 1.0) continue;
    x(i, 0) = a;
    x(i, 1) = b;
    y[static_cast<std::size_t>(i)] = s > 0 ? 1 : 0;
    ++i;
  }
}

}  // namespace fedabc::oracle
