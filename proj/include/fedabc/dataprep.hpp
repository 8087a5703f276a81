#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fedabc/error.hpp"
#include "fedabc/linalg.hpp"
#include "fedabc/rng.hpp"
#include "fedabc/stat_samplers.hpp"

namespace fedabc {

/// Feature matrix with binary labels. `ids` are the original row indices.
struct Dataset {
  Matrix x;
  std::vector<int> y;
  std::vector<std::string> feature_names;
  std::vector<std::size_t> ids;

  Eigen::Index rows() const { return x.rows(); }
  Eigen::Index cols() const { return x.cols(); }

  std::size_t count(int label) const { return static_cast<std::size_t>(std::count(y.begin(), y.end(), label)); }

  Dataset subset(const std::vector<std::size_t>& rows) const {
    Dataset d;
    d.feature_names = feature_names;
    d.x.resize(static_cast<Eigen::Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      d.x.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
      d.y.push_back(y[rows[i]]);
      d.ids.push_back(ids[rows[i]]);
    }
    return d;
  }

  Dataset select_columns(const std::vector<std::size_t>& cols) const {
    Dataset d;
    d.y = y;
    d.ids = ids;
    d.x.resize(x.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j) {
      d.x.col(static_cast<Eigen::Index>(j)) = x.col(static_cast<Eigen::Index>(cols[j]));
      d.feature_names.push_back(feature_names[cols[j]]);
    }
    return d;
  }

  /// Rows whose label equals `label`.
  Matrix rows_with_label(int label) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] == label) idx.push_back(i);
    }
    return subset(idx).x;
  }
};

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    auto cell = line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
    while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
    while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r')) cell.remove_suffix(1);
    out.push_back(cell);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline bool parse_double(std::string_view s, double& out) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && std::isfinite(out);
}

/// Shortest text that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

struct CsvOptions {
  std::string label_column = "label";
  std::string id_column = "id";  // optional; used as row ids when present
};

inline Dataset load_csv(const std::string& path, const CsvOptions& opt = {}) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw IngestionError("'" + path + "' is empty");
  const auto header = detail::split_commas(line);
  int label_col = -1, id_col = -1;
  std::vector<std::size_t> feature_cols;
  Dataset d;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == opt.label_column) {
      label_col = static_cast<int>(c);
    } else if (!opt.id_column.empty() && header[c] == opt.id_column) {
      id_col = static_cast<int>(c);
    } else {
      feature_cols.push_back(c);
      d.feature_names.emplace_back(header[c]);
    }
  }
  if (label_col < 0) throw IngestionError("'" + path + "' has no label column '" + opt.label_column + "'");

  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_commas(line);
    if (cells.size() != header.size()) {
      throw IngestionError(path + " row " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                           " cells, found " + std::to_string(cells.size()));
    }
    auto cell_error = [&](std::size_t c, const std::string& why) {
      return IngestionError(path + " row " + std::to_string(line_no) + ", column " + std::to_string(c + 1) + " (" +
                            std::string(header[c]) + "): " + why + " '" + std::string(cells[c]) + "'");
    };
    double label = 0.0;
    if (!detail::parse_double(cells[static_cast<std::size_t>(label_col)], label) || (label != 0.0 && label != 1.0)) {
      throw cell_error(static_cast<std::size_t>(label_col), "label must be 0 or 1, got");
    }
    d.y.push_back(static_cast<int>(label));
    if (id_col >= 0) {
      double id = 0.0;
      if (!detail::parse_double(cells[static_cast<std::size_t>(id_col)], id) || id < 0 || id != std::floor(id)) {
        throw cell_error(static_cast<std::size_t>(id_col), "bad row id");
      }
      d.ids.push_back(static_cast<std::size_t>(id));
    } else {
      d.ids.push_back(rows.size());
    }
    std::vector<double> r(feature_cols.size());
    for (std::size_t j = 0; j < feature_cols.size(); ++j) {
      if (!detail::parse_double(cells[feature_cols[j]], r[j])) throw cell_error(feature_cols[j], "not a number");
    }
    rows.push_back(std::move(r));
  }
  d.x.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(feature_cols.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < feature_cols.size(); ++j)
      d.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return d;
}

inline void write_csv(const std::string& path, const Dataset& d, const CsvOptions& opt = {}) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write '" + path + "'");
  out << opt.id_column;
  for (const auto& n : d.feature_names) out << ',' << n;
  out << ',' << opt.label_column << '\n';
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    out << d.ids[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < d.cols(); ++j) out << ',' << detail::format_double(d.x(i, j));
    out << ',' << d.y[static_cast<std::size_t>(i)] << '\n';
  }
}

// ---------------------------------------------------------------------------
// Feature filtering and standardization

/// Greedy scan in column order: a column is dropped iff |Pearson r| exceeds
/// `threshold` against an earlier kept column. Zero-variance columns correlate
/// with nothing.
inline std::vector<std::size_t> correlation_filter(const Matrix& x, double threshold) {
  if (x.rows() < 2) throw InsufficientData("correlation filter needs at least 2 rows");
  if (!(threshold > 0.0 && threshold <= 1.0)) throw InvalidHyperparameter("correlation threshold must be in (0, 1]");
  const Matrix centered = x.rowwise() - x.colwise().mean();
  const Vector norms = centered.colwise().norm().transpose();
  std::vector<std::size_t> kept;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    bool drop = false;
    if (norms(j) > 0.0) {
      for (std::size_t k : kept) {
        const auto kk = static_cast<Eigen::Index>(k);
        if (norms(kk) == 0.0) continue;
        const double r = centered.col(j).dot(centered.col(kk)) / (norms(j) * norms(kk));
        if (std::abs(r) > threshold) {
          drop = true;
          break;
        }
      }
    }
    if (!drop) kept.push_back(static_cast<std::size_t>(j));
  }
  return kept;
}

struct StandardizationStats {
  Vector mean;
  Vector scale;  // population sd, 1 where the column is constant
};

inline StandardizationStats fit_standardization(const Matrix& train) {
  if (train.rows() == 0) throw InsufficientData("standardization needs training rows");
  StandardizationStats s;
  s.mean = train.colwise().mean().transpose();
  const Matrix c = train.rowwise() - s.mean.transpose();
  s.scale = (c.colwise().squaredNorm() / static_cast<double>(train.rows())).cwiseSqrt().transpose();
  for (Eigen::Index j = 0; j < s.scale.size(); ++j) {
    if (!(s.scale(j) > 0.0)) s.scale(j) = 1.0;
  }
  return s;
}

inline Matrix apply_standardization(const Matrix& x, const StandardizationStats& s) {
  if (x.cols() != s.mean.size()) throw ShapeError("standardization width mismatch");
  Matrix out = x.rowwise() - s.mean.transpose();
  return out.array().rowwise() / s.scale.transpose().array();
}

struct Standardized {
  Dataset train;
  Dataset test;
  StandardizationStats stats;
};

/// Both sides are transformed with statistics of the training side only.
inline Standardized standardize(const Dataset& train, const Dataset& test) {
  Standardized out{train, test, fit_standardization(train.x)};
  out.train.x = apply_standardization(train.x, out.stats);
  out.test.x = apply_standardization(test.x, out.stats);
  return out;
}

// ---------------------------------------------------------------------------
// Site partitioning and splitting

struct ClassCounts {
  std::size_t major = 0;  // label 0
  std::size_t minor = 0;  // label 1
  friend bool operator==(const ClassCounts&, const ClassCounts&) = default;
};

/// Per-site (major, minor) row totals before the train/test split.
using SiteProfile = std::vector<ClassCounts>;

/// Site totals whose 0.6 stratified split yields training counts 51/9, 46/8,
/// 62/10 and test sets of 40, 36 and 48 rows.
inline SiteProfile reference_site_profile() { return {{85, 15}, {77, 13}, {104, 16}}; }

inline std::size_t train_count(std::size_t n, double train_frac) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(n) * train_frac + 0.5));
}

struct TrainTest {
  Dataset train;
  Dataset test;
};

/// Per-class split with round-half-up on the training side; rows keep their
/// original relative order.
inline TrainTest stratified_split(const Dataset& d, double train_frac, RngHandle seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw InvalidHyperparameter("train fraction must be in (0, 1)");
  Rng rng(seed);
  std::vector<std::size_t> train_rows, test_rows;
  for (int label : {0, 1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < d.y.size(); ++i) {
      if (d.y[i] == label) idx.push_back(i);
    }
    if (idx.size() < 2) {
      throw InsufficientData("class " + std::to_string(label) + " has " + std::to_string(idx.size()) +
                             " rows; stratified split needs at least 2");
    }
    for (std::size_t i = idx.size() - 1; i > 0; --i) std::swap(idx[i], idx[rng.index(i + 1)]);
    const std::size_t n_train = train_count(idx.size(), train_frac);
    train_rows.insert(train_rows.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    test_rows.insert(test_rows.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(test_rows.begin(), test_rows.end());
  return {d.subset(train_rows), d.subset(test_rows)};
}

struct SitePartition {
  std::vector<TrainTest> sites;
};

/// Random disjoint assignment of rows to sites matching `profile` exactly,
/// followed by a stratified split inside each site.
inline SitePartition partition_sites(const Dataset& d, const SiteProfile& profile, double train_frac,
                                     RngHandle seed) {
  std::size_t need_major = 0, need_minor = 0;
  for (const auto& p : profile) {
    need_major += p.major;
    need_minor += p.minor;
  }
  if (need_major > d.count(0) || need_minor > d.count(1)) {
    throw InsufficientData("site profile needs " + std::to_string(need_major) + "/" + std::to_string(need_minor) +
                           " rows but the data has " + std::to_string(d.count(0)) + "/" +
                           std::to_string(d.count(1)));
  }
  Rng rng(seed.child("assign"));
  std::vector<std::size_t> pools[2];
  for (std::size_t i = 0; i < d.y.size(); ++i) pools[d.y[i]].push_back(i);
  for (auto& pool : pools) {
    for (std::size_t i = pool.size() - 1; i > 0 && !pool.empty(); --i) std::swap(pool[i], pool[rng.index(i + 1)]);
  }
  SitePartition out;
  std::size_t at[2] = {0, 0};
  for (std::size_t s = 0; s < profile.size(); ++s) {
    std::vector<std::size_t> rows;
    const std::size_t take[2] = {profile[s].major, profile[s].minor};
    for (int c : {0, 1}) {
      rows.insert(rows.end(), pools[c].begin() + static_cast<std::ptrdiff_t>(at[c]),
                  pools[c].begin() + static_cast<std::ptrdiff_t>(at[c] + take[c]));
      at[c] += take[c];
    }
    std::sort(rows.begin(), rows.end());
    out.sites.push_back(stratified_split(d.subset(rows), train_frac, seed.child("split").child(s)));
  }
  return out;
}

/// floor(0.9 * total minority training rows).
inline int mixture_components_for(std::size_t minority_rows) {
  return static_cast<int>(std::floor(0.9 * static_cast<double>(minority_rows)));
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthSpec {
  SiteProfile profile = reference_site_profile();
  int features = 88;
  double margin = 2.5;      // class-mean separation along the signal direction, in sd units
  double site_shift = 0.3;  // sd of the per-site mean offset
  int factors = 4;          // shared low-rank structure
  double factor_scale = 0.4;
  RngHandle seed{};
};

inline void to_json(nlohmann::json& j, const SynthSpec& s) {
  nlohmann::json prof = nlohmann::json::array();
  for (const auto& p : s.profile) prof.push_back({p.major, p.minor});
  j = {{"profile", prof},           {"features", s.features}, {"margin", s.margin},
       {"site_shift", s.site_shift}, {"factors", s.factors},   {"factor_scale", s.factor_scale}};
}

inline void from_json(const nlohmann::json& j, SynthSpec& s) {
  if (j.contains("profile")) {
    s.profile.clear();
    for (const auto& p : j.at("profile")) s.profile.push_back({p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>()});
  }
  s.features = j.value("features", s.features);
  s.margin = j.value("margin", s.margin);
  s.site_shift = j.value("site_shift", s.site_shift);
  s.factors = j.value("factors", s.factors);
  s.factor_scale = j.value("factor_scale", s.factor_scale);
}

struct SynthData {
  Dataset data;
  std::vector<int> site_of_row;
};

/// Two overlapping Gaussian classes sharing a low-rank-plus-identity
/// covariance. The minority mean sits `margin` standard deviations along a
/// random unit direction; each site adds its own small mean offset, so pooled
/// data separates better than any single site's few minority rows.
inline SynthData synth_generate(const SynthSpec& spec) {
  if (spec.features < 2) throw InvalidHyperparameter("synthetic data needs at least 2 features");
  if (spec.profile.empty()) throw InvalidHyperparameter("synthetic data needs at least one site");
  const auto dim = static_cast<Eigen::Index>(spec.features);
  Rng rng(spec.seed.child("structure"));
  Matrix loadings(dim, std::max(spec.factors, 0));
  for (Eigen::Index i = 0; i < loadings.size(); ++i) loadings.data()[i] = spec.factor_scale * rng.normal();
  const Matrix cov = loadings * loadings.transpose() + Matrix::Identity(dim, dim);
  Vector direction(dim);
  for (Eigen::Index i = 0; i < dim; ++i) direction(i) = rng.normal();
  direction.normalize();
  // Scale the shift so the separation is `margin` in Mahalanobis units.
  const auto llt = cholesky(cov, "synthetic covariance");
  const double maha = std::sqrt(direction.dot(llt.solve(direction)));
  const Vector class_shift = (spec.margin / maha) * direction;

  SynthData out;
  std::size_t total = 0;
  for (const auto& p : spec.profile) total += p.major + p.minor;
  out.data.x.resize(static_cast<Eigen::Index>(total), dim);
  for (int j = 0; j < spec.features; ++j) out.data.feature_names.push_back("f" + std::to_string(j + 1));

  Rng draw(spec.seed.child("rows"));
  std::size_t row = 0;
  for (std::size_t s = 0; s < spec.profile.size(); ++s) {
    Vector offset(dim);
    for (Eigen::Index i = 0; i < dim; ++i) offset(i) = spec.site_shift * draw.normal();
    for (int label : {0, 1}) {
      const std::size_t n = label == 0 ? spec.profile[s].major : spec.profile[s].minor;
      const Vector mean = offset + (label == 1 ? class_shift : Vector::Zero(dim));
      const Matrix rows = sample_mvn(mean, cov, static_cast<Eigen::Index>(n), draw);
      for (std::size_t i = 0; i < n; ++i, ++row) {
        out.data.x.row(static_cast<Eigen::Index>(row)) = rows.row(static_cast<Eigen::Index>(i));
        out.data.y.push_back(label);
        out.data.ids.push_back(row);
        out.site_of_row.push_back(static_cast<int>(s));
      }
    }
  }
  return out;
}

}  // namespace fedabc
