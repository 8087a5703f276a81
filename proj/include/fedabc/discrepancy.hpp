#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <json.hpp>

#include "fedabc/error.hpp"
#include "fedabc/linalg.hpp"

namespace fedabc {

/// Encoded or generated latent rows held by (or destined for) one site.
struct LatentBatch {
  Matrix values;
  int site_id = 0;
};

/// Fixed-range per-dimension histogram used as the density estimate P(.).
struct HistogramSpec {
  int bins = 16;
  double lo = -3.0;
  double hi = 3.0;
  double epsilon = 1e-6;

  void validate() const {
    if (bins < 2) throw InvalidHyperparameter("histogram needs at least 2 bins");
    if (!(lo < hi)) throw InvalidHyperparameter("histogram range must satisfy lo < hi");
    if (!(epsilon > 0.0)) throw InvalidHyperparameter("histogram smoothing must be positive");
  }
};

inline void to_json(nlohmann::json& j, const HistogramSpec& h) {
  j = {{"bins", h.bins}, {"lo", h.lo}, {"hi", h.hi}, {"epsilon", h.epsilon}};
}
inline void from_json(const nlohmann::json& j, HistogramSpec& h) {
  h.bins = j.value("bins", h.bins);
  h.lo = j.value("lo", h.lo);
  h.hi = j.value("hi", h.hi);
  h.epsilon = j.value("epsilon", h.epsilon);
}

/// sum_j ||enc_j - gen_j||^2, rows paired by index.
inline double euclidean_disc(const Matrix& enc, const Matrix& gen) {
  if (enc.rows() != gen.rows() || enc.cols() != gen.cols()) {
    throw ShapeError("euclidean discrepancy needs equally shaped batches");
  }
  return (enc - gen).squaredNorm();
}

namespace detail {

/// Smoothed, normalized histogram of one column.
inline std::vector<double> column_histogram(const Matrix& m, Eigen::Index col, const HistogramSpec& h) {
  std::vector<double> mass(static_cast<std::size_t>(h.bins), 0.0);
  const double width = (h.hi - h.lo) / h.bins;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double v = std::clamp(m(r, col), h.lo, h.hi);
    auto b = static_cast<long>(std::floor((v - h.lo) / width));
    b = std::clamp<long>(b, 0, h.bins - 1);
    mass[static_cast<std::size_t>(b)] += 1.0;
  }
  const double n = static_cast<double>(m.rows());
  double total = 0.0;
  for (double& x : mass) {
    x = x / n + h.epsilon;
    total += x;
  }
  for (double& x : mass) x /= total;
  return mass;
}

}  // namespace detail

/// D_KL(enc || gen) from per-dimension histograms, summed over dimensions.
inline double kl_empirical(const Matrix& enc, const Matrix& gen, const HistogramSpec& spec = {}) {
  spec.validate();
  if (enc.rows() == 0 || gen.rows() == 0) throw EmptyInput("KL divergence needs non-empty batches");
  if (enc.cols() != gen.cols()) throw ShapeError("KL divergence needs batches of equal dimension");
  double kl = 0.0;
  for (Eigen::Index c = 0; c < enc.cols(); ++c) {
    const auto p = detail::column_histogram(enc, c, spec);
    const auto q = detail::column_histogram(gen, c, spec);
    for (std::size_t b = 0; b < p.size(); ++b) kl += p[b] * std::log(p[b] / q[b]);
  }
  return std::max(kl, 0.0);
}

/// phi for one site: paired squared Euclidean distance plus histogram KL.
inline double site_similarity(const Matrix& enc, const Matrix& gen, const HistogramSpec& spec = {}) {
  return euclidean_disc(enc, gen) + kl_empirical(enc, gen, spec);
}

inline double site_similarity(const LatentBatch& enc, const LatentBatch& gen, const HistogramSpec& spec = {}) {
  return site_similarity(enc.values, gen.values, spec);
}

}  // namespace fedabc
