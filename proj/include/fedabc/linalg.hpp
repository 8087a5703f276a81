#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fedabc/error.hpp"

namespace fedabc {

/// Row-major so that one sample is one contiguous row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline constexpr double kSymmetryTolerance = 1e-10;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// Cholesky factor of a symmetric positive-definite matrix. The input is
/// symmetrized as (A + A^T)/2 after the symmetry check.
inline Eigen::LLT<Matrix> cholesky(const Matrix& a, const char* what = "matrix") {
  if (a.rows() != a.cols() || a.rows() == 0) {
    throw ShapeError(std::string(what) + " must be square and non-empty");
  }
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > kSymmetryTolerance * scale) {
    throw NotPositiveDefinite(std::string(what) + " is not symmetric");
  }
  Matrix sym = 0.5 * (a + a.transpose());
  Eigen::LLT<Matrix> llt(sym);
  if (llt.info() != Eigen::Success) {
    throw NotPositiveDefinite(std::string(what) + " is not positive definite");
  }
  // LLT reports success on some indefinite inputs with a tiny negative pivot.
  const auto& l = llt.matrixLLT();
  for (Eigen::Index i = 0; i < l.rows(); ++i) {
    if (!(l(i, i) > 0.0) || !std::isfinite(l(i, i))) {
      throw NotPositiveDefinite(std::string(what) + " is not positive definite");
    }
  }
  return llt;
}

inline bool is_positive_definite(const Matrix& a) {
  try {
    cholesky(a);
    return true;
  } catch (const Error&) {
    return false;
  }
}

inline nlohmann::json to_json_value(const Vector& v) {
  return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
}

inline nlohmann::json to_json_value(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    rows.push_back(std::vector<double>(m.row(i).data(), m.row(i).data() + m.cols()));
  }
  return rows;
}

inline Vector vector_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw ShapeError("expected a JSON array for a vector");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
  return v;
}

/// `cols` is needed to recover the shape of an empty (0-row) matrix.
inline Matrix matrix_from_json(const nlohmann::json& j, Eigen::Index cols = -1) {
  if (!j.is_array()) throw ShapeError("expected a JSON array of rows for a matrix");
  const auto rows = static_cast<Eigen::Index>(j.size());
  if (rows == 0) return Matrix(0, cols < 0 ? 0 : cols);
  const auto c = static_cast<Eigen::Index>(j[0].size());
  Matrix m(rows, c);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != c) {
      throw ShapeError("ragged matrix rows");
    }
    for (Eigen::Index k = 0; k < c; ++k) m(i, k) = row[static_cast<std::size_t>(k)].get<double>();
  }
  return m;
}

}  // namespace fedabc
