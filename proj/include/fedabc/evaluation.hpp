#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedabc/error.hpp"
#include "fedabc/gmm.hpp"
#include "fedabc/linalg.hpp"
#include "fedabc/moae.hpp"
#include "fedabc/rng.hpp"

namespace fedabc {

// ---------------------------------------------------------------------------
// Logistic regression

struct LogRegOptions {
  int iters = 2000;
  double lr = 0.1;
  double l2 = 1e-4;
};

inline void to_json(nlohmann::json& j, const LogRegOptions& o) {
  j = {{"iters", o.iters}, {"lr", o.lr}, {"l2", o.l2}};
}
inline void from_json(const nlohmann::json& j, LogRegOptions& o) {
  o.iters = j.value("iters", o.iters);
  o.lr = j.value("lr", o.lr);
  o.l2 = j.value("l2", o.l2);
}

struct LogisticModel {
  Vector w;
  double b = 0.0;
  LogRegOptions options;
  double final_loss = 0.0;

  Vector predict_proba(const Matrix& x) const {
    if (x.cols() != w.size()) throw ShapeError("classifier expects " + std::to_string(w.size()) + " columns");
    Vector z = x * w;
    return z.unaryExpr([this](double v) { return act::sigmoid(v + b); });
  }
};

namespace detail {

inline void check_labels(const Matrix& x, const std::vector<int>& y) {
  if (static_cast<Eigen::Index>(y.size()) != x.rows()) throw ShapeError("label count does not match rows");
  for (int v : y) {
    if (v != 0 && v != 1) throw ShapeError("labels must be 0 or 1");
  }
}

/// Mean log-loss plus l2/2 * |w|^2, computed from logits for stability.
inline double logreg_loss(const Matrix& x, const Vector& yv, const Vector& w, double b, double l2) {
  const Vector z = (x * w).array() + b;
  double total = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    // log(1 + e^z) - y z
    const double zi = z(i);
    const double softplus = zi > 0.0 ? zi + std::log1p(std::exp(-zi)) : std::log1p(std::exp(zi));
    total += softplus - yv(i) * zi;
  }
  return total / static_cast<double>(x.rows()) + 0.5 * l2 * w.squaredNorm();
}

}  // namespace detail

/// Full-batch gradient descent. A step that would raise the loss is retried
/// with half the learning rate, which then stays halved.
inline LogisticModel train_logreg(const Matrix& x, const std::vector<int>& y, const LogRegOptions& opt = {}) {
  detail::check_labels(x, y);
  if (x.rows() == 0) throw InsufficientData("logistic regression needs rows");
  if (!x.allFinite()) throw NumericError("logistic regression input contains non-finite values");
  if (opt.iters < 0 || !(opt.lr > 0.0) || !(opt.l2 >= 0.0)) throw InvalidHyperparameter("bad logistic options");
  const auto n = static_cast<double>(x.rows());
  Vector yv(x.rows());
  for (Eigen::Index i = 0; i < yv.size(); ++i) yv(i) = y[static_cast<std::size_t>(i)];

  LogisticModel m;
  m.options = opt;
  m.w = Vector::Zero(x.cols());
  double lr = opt.lr;
  double loss = detail::logreg_loss(x, yv, m.w, m.b, opt.l2);
  for (int it = 0; it < opt.iters; ++it) {
    const Vector p = m.predict_proba(x);
    const Vector r = p - yv;
    const Vector gw = x.transpose() * r / n + opt.l2 * m.w;
    const double gb = r.sum() / n;
    if (!gw.allFinite() || !std::isfinite(gb)) throw NumericError("logistic regression gradient is not finite");
    for (int halvings = 0;; ++halvings) {
      const Vector w = m.w - lr * gw;
      const double b = m.b - lr * gb;
      const double next = detail::logreg_loss(x, yv, w, b, opt.l2);
      if (std::isnan(next)) throw NumericError("logistic regression diverged");
      if (next <= loss || halvings >= 60) {
        if (next <= loss) {
          m.w = w;
          m.b = b;
          loss = next;
        }
        break;
      }
      lr *= 0.5;
    }
  }
  m.final_loss = loss;
  return m;
}

// ---------------------------------------------------------------------------
// Metrics

inline double f1_score(double precision, double recall) {
  return precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
}

struct MetricsRow {
  double accuracy = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double cutoff = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::vector<std::string> degenerate;  // metrics whose denominator was zero
};

inline MetricsRow compute_metrics(const std::vector<int>& pred, const std::vector<int>& y) {
  if (pred.size() != y.size()) throw ShapeError("prediction and label lengths differ");
  MetricsRow m;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (pred[i] == 1 && y[i] == 1) ++m.tp;
    else if (pred[i] == 1) ++m.fp;
    else if (y[i] == 1) ++m.fn;
    else ++m.tn;
  }
  auto ratio = [&m](std::size_t num, std::size_t den, const char* name) {
    if (den == 0) {
      m.degenerate.emplace_back(name);
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  m.accuracy = ratio(m.tp + m.tn, y.size(), "accuracy");
  m.sensitivity = ratio(m.tp, m.tp + m.fn, "sensitivity");
  m.recall = m.sensitivity;
  m.specificity = ratio(m.tn, m.tn + m.fp, "specificity");
  m.precision = ratio(m.tp, m.tp + m.fp, "precision");
  m.f1 = f1_score(m.precision, m.recall);
  return m;
}

inline std::vector<int> apply_cutoff(const Vector& probs, double cutoff) {
  std::vector<int> out(static_cast<std::size_t>(probs.size()));
  for (Eigen::Index i = 0; i < probs.size(); ++i) out[static_cast<std::size_t>(i)] = probs(i) >= cutoff ? 1 : 0;
  return out;
}

struct CutoffChoice {
  double cutoff = 0.5;
  double f1 = 0.0;
};

/// Evaluates the rule p >= c at every distinct probability c and keeps the
/// F1-maximizing one; ties go to the smallest c.
inline CutoffChoice select_cutoff(const Vector& probs, const std::vector<int>& y) {
  if (static_cast<Eigen::Index>(y.size()) != probs.size()) throw ShapeError("probability and label lengths differ");
  const auto positives = static_cast<std::size_t>(std::count(y.begin(), y.end(), 1));
  if (positives == 0) throw InsufficientData("cut-off selection needs at least one positive label");
  std::vector<std::pair<double, int>> order;
  for (Eigen::Index i = 0; i < probs.size(); ++i) order.emplace_back(probs(i), y[static_cast<std::size_t>(i)]);
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  CutoffChoice best{order.front().first, -1.0};
  std::size_t tp = 0, predicted = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double c = order[i].first;
    for (; i < order.size() && order[i].first == c; ++i) {
      ++predicted;
      tp += static_cast<std::size_t>(order[i].second);
    }
    const double precision = static_cast<double>(tp) / static_cast<double>(predicted);
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    const double f1 = f1_score(precision, recall);
    // Descending scan: >= lets a later (smaller) cut-off win ties.
    if (f1 >= best.f1) best = {c, f1};
  }
  return best;
}

// ---------------------------------------------------------------------------
// Local oversampling baseline

/// floor(0.9 * local minority count), at least 1.
inline int local_components_for(std::size_t minority_rows) {
  return std::max(1, static_cast<int>(std::floor(0.9 * static_cast<double>(minority_rows))));
}

inline Matrix oversample_local_gmm(const Matrix& minority, int k_local, Eigen::Index n_needed, Rng& rng,
                                   const EmOptions& em = {}) {
  if (n_needed < 0) throw InvalidHyperparameter("negative oversample count");
  if (n_needed == 0) return Matrix(0, minority.cols());
  if (minority.rows() < k_local) {
    throw InsufficientData("local GMM needs at least " + std::to_string(k_local) + " minority rows, has " +
                           std::to_string(minority.rows()));
  }
  const EmFit fit = fit_gmm_em(minority, k_local, rng, em);
  return sample_gmm(fit.params, n_needed, rng).rows;
}

// ---------------------------------------------------------------------------
// Experiment conditions

enum class Condition { Global, Raw, Oversampled, Abc };

inline constexpr Condition kAllConditions[] = {Condition::Global, Condition::Raw, Condition::Oversampled,
                                               Condition::Abc};

inline const char* condition_name(Condition c) {
  switch (c) {
    case Condition::Global: return "Global";
    case Condition::Raw: return "Raw";
    case Condition::Oversampled: return "OS";
    case Condition::Abc: return "ABC";
  }
  return "?";
}

inline Condition condition_from_name(const std::string& s) {
  for (Condition c : kAllConditions) {
    if (s == condition_name(c)) return c;
  }
  throw ConfigError("unknown condition '" + s + "'");
}

/// Encoded rows for one site. Local encodings come from the site's own
/// autoencoder; the global ones from the autoencoder trained on pooled data.
struct SiteArtifacts {
  Matrix train_latent;
  std::vector<int> train_y;
  Matrix test_latent;
  std::vector<int> test_y;
  std::optional<Matrix> global_train_latent;
  std::optional<Matrix> global_test_latent;
  std::optional<Matrix> abc_oversamples;
};

struct EvaluationArtifacts {
  std::vector<SiteArtifacts> sites;
  std::optional<double> epsilon;
};

struct ConditionResult {
  int site = 0;  // zero-based
  Condition condition = Condition::Raw;
  MetricsRow metrics;
  std::optional<double> threshold;
};

namespace detail {

inline MetricsRow fit_and_score(const Matrix& train, const std::vector<int>& train_y, const Matrix& test,
                                const std::vector<int>& test_y, const LogRegOptions& opt) {
  const LogisticModel model = train_logreg(train, train_y, opt);
  const CutoffChoice cut = select_cutoff(model.predict_proba(train), train_y);
  MetricsRow row = compute_metrics(apply_cutoff(model.predict_proba(test), cut.cutoff), test_y);
  row.cutoff = cut.cutoff;
  return row;
}

inline Matrix stack(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols() && b.rows() > 0) throw ShapeError("oversample width does not match latent width");
  Matrix out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a;
  out.bottomRows(b.rows()) = b;
  return out;
}

inline Eigen::Index minority_deficit(const std::vector<int>& y) {
  const auto minor = std::count(y.begin(), y.end(), 1);
  return static_cast<Eigen::Index>(static_cast<std::ptrdiff_t>(y.size()) - 2 * minor);
}

}  // namespace detail

/// Runs one condition for every site. Cut-offs are always chosen on the
/// condition's own training rows.
inline std::vector<ConditionResult> run_condition(Condition condition, const EvaluationArtifacts& art,
                                                  const LogRegOptions& opt, RngHandle stream, const EmOptions& em = {}) {
  std::vector<ConditionResult> out;
  if (condition == Condition::Global) {
    Matrix pooled(0, 0);
    std::vector<int> pooled_y;
    for (std::size_t s = 0; s < art.sites.size(); ++s) {
      const auto& site = art.sites[s];
      if (!site.global_train_latent || !site.global_test_latent) {
        throw InsufficientData("Global condition needs global encodings for site " + std::to_string(s + 1));
      }
      pooled = pooled.size() == 0 ? *site.global_train_latent : detail::stack(pooled, *site.global_train_latent);
      pooled_y.insert(pooled_y.end(), site.train_y.begin(), site.train_y.end());
    }
    const LogisticModel model = train_logreg(pooled, pooled_y, opt);
    const CutoffChoice cut = select_cutoff(model.predict_proba(pooled), pooled_y);
    for (std::size_t s = 0; s < art.sites.size(); ++s) {
      const auto& site = art.sites[s];
      MetricsRow row = compute_metrics(apply_cutoff(model.predict_proba(*site.global_test_latent), cut.cutoff),
                                       site.test_y);
      row.cutoff = cut.cutoff;
      out.push_back({static_cast<int>(s), condition, std::move(row), std::nullopt});
    }
    return out;
  }

  for (std::size_t s = 0; s < art.sites.size(); ++s) {
    const auto& site = art.sites[s];
    Matrix train = site.train_latent;
    std::vector<int> train_y = site.train_y;
    const Eigen::Index deficit = std::max<Eigen::Index>(0, detail::minority_deficit(train_y));
    std::optional<double> threshold;
    if (condition == Condition::Oversampled) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < train_y.size(); ++i) {
        if (train_y[i] == 1) idx.push_back(i);
      }
      Matrix minority(static_cast<Eigen::Index>(idx.size()), train.cols());
      for (std::size_t i = 0; i < idx.size(); ++i)
        minority.row(static_cast<Eigen::Index>(i)) = train.row(static_cast<Eigen::Index>(idx[i]));
      Rng rng(stream.child("os").child(s));
      const Matrix extra = oversample_local_gmm(minority, local_components_for(idx.size()), deficit, rng, em);
      train = detail::stack(train, extra);
      train_y.insert(train_y.end(), static_cast<std::size_t>(extra.rows()), 1);
    } else if (condition == Condition::Abc) {
      if (!site.abc_oversamples) {
        throw NoPosterior("ABC condition needs posterior oversamples for site " + std::to_string(s + 1));
      }
      if (site.abc_oversamples->rows() != deficit) {
        throw ShapeError("site " + std::to_string(s + 1) + " received " +
                         std::to_string(site.abc_oversamples->rows()) + " oversamples, needs " +
                         std::to_string(deficit));
      }
      train = detail::stack(train, *site.abc_oversamples);
      train_y.insert(train_y.end(), static_cast<std::size_t>(deficit), 1);
      threshold = art.epsilon;
    }
    out.push_back({static_cast<int>(s), condition,
                   detail::fit_and_score(train, train_y, site.test_latent, site.test_y, opt), threshold});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricsReport {
  std::vector<ConditionResult> columns;  // site-major, conditions in table order
  nlohmann::json provenance = nlohmann::json::object();

  const ConditionResult* find(int site, Condition c) const {
    for (const auto& col : columns) {
      if (col.site == site && col.condition == c) return &col;
    }
    return nullptr;
  }

  int sites() const {
    int n = 0;
    for (const auto& c : columns) n = std::max(n, c.site + 1);
    return n;
  }
};

inline constexpr const char* kMetricFields[] = {"accuracy", "sensitivity", "specificity", "precision",
                                                "recall",   "f1",          "cutoff"};
inline constexpr const char* kMetricLabels[] = {"Accuracy", "Sensitivity", "Specificity", "Precision",
                                                "Recall",   "F1",          "Cut-off"};

inline double metric_field(const MetricsRow& m, std::string_view field) {
  if (field == "accuracy") return m.accuracy;
  if (field == "sensitivity") return m.sensitivity;
  if (field == "specificity") return m.specificity;
  if (field == "precision") return m.precision;
  if (field == "recall") return m.recall;
  if (field == "f1") return m.f1;
  if (field == "cutoff") return m.cutoff;
  throw ConfigError("unknown metric '" + std::string(field) + "'");
}

inline std::string column_title(const ConditionResult& c) {
  const std::string site = "Site " + std::to_string(c.site + 1);
  return c.condition == Condition::Global ? "Global " + site : site + " " + condition_name(c.condition);
}

/// Orders columns site by site in the Global, Raw, OS, ABC sequence.
inline void sort_columns(std::vector<ConditionResult>& cols) {
  std::stable_sort(cols.begin(), cols.end(), [](const ConditionResult& a, const ConditionResult& b) {
    return std::pair(a.site, static_cast<int>(a.condition)) < std::pair(b.site, static_cast<int>(b.condition));
  });
}

namespace detail {

inline std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline std::string render_grid(const std::vector<std::string>& header, const std::vector<std::string>& row_labels,
                               const std::vector<std::vector<std::string>>& cells) {
  std::size_t label_w = 0;
  for (const auto& l : row_labels) label_w = std::max(label_w, l.size());
  std::vector<std::size_t> widths(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    widths[c] = header[c].size();
    for (const auto& r : cells) widths[c] = std::max(widths[c], r[c].size());
  }
  auto pad = [](const std::string& s, std::size_t w) { return std::string(w - s.size(), ' ') + s; };
  std::string out = std::string(label_w, ' ');
  for (std::size_t c = 0; c < header.size(); ++c) out += "  " + pad(header[c], widths[c]);
  out += '\n';
  for (std::size_t r = 0; r < row_labels.size(); ++r) {
    out += row_labels[r] + std::string(label_w - row_labels[r].size(), ' ');
    for (std::size_t c = 0; c < header.size(); ++c) out += "  " + pad(cells[r][c], widths[c]);
    out += '\n';
  }
  return out;
}

}  // namespace detail

/// Plain-text table: one column per (site, condition), one row per metric
/// plus the ABC threshold row.
inline std::string render_text(const MetricsReport& report) {
  std::vector<std::string> header;
  for (const auto& c : report.columns) header.push_back(column_title(c));
  std::vector<std::string> labels;
  std::vector<std::vector<std::string>> cells;
  for (std::size_t f = 0; f < std::size(kMetricFields); ++f) {
    if (std::string_view(kMetricFields[f]) == "cutoff") {
      labels.emplace_back("Threshold");
      std::vector<std::string> row;
      for (const auto& c : report.columns) row.push_back(c.threshold ? detail::fixed4(*c.threshold) : "-");
      cells.push_back(std::move(row));
    }
    labels.emplace_back(kMetricLabels[f]);
    std::vector<std::string> row;
    for (const auto& c : report.columns) row.push_back(detail::fixed4(metric_field(c.metrics, kMetricFields[f])));
    cells.push_back(std::move(row));
  }
  std::string out = detail::render_grid(header, labels, cells);
  if (!report.provenance.empty()) out += "\n" + report.provenance.dump() + "\n";
  return out;
}

inline nlohmann::json to_json_value(const MetricsReport& report) {
  nlohmann::json cols = nlohmann::json::array();
  for (const auto& c : report.columns) {
    nlohmann::json j = {{"site", c.site + 1}, {"condition", condition_name(c.condition)}};
    for (const char* f : kMetricFields) j[f] = metric_field(c.metrics, f);
    j["confusion"] = {{"tp", c.metrics.tp}, {"fp", c.metrics.fp}, {"fn", c.metrics.fn}, {"tn", c.metrics.tn}};
    j["degenerate"] = c.metrics.degenerate;
    j["threshold"] = c.threshold ? nlohmann::json(*c.threshold) : nlohmann::json(nullptr);
    cols.push_back(std::move(j));
  }
  return {{"columns", cols}, {"provenance", report.provenance}};
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  try {
    MetricsReport r;
    r.provenance = j.value("provenance", nlohmann::json::object());
    for (const auto& c : j.at("columns")) {
      ConditionResult col;
      col.site = c.at("site").get<int>() - 1;
      col.condition = condition_from_name(c.at("condition").get<std::string>());
      auto& m = col.metrics;
      m.accuracy = c.at("accuracy");
      m.sensitivity = c.at("sensitivity");
      m.specificity = c.at("specificity");
      m.precision = c.at("precision");
      m.recall = c.at("recall");
      m.f1 = c.at("f1");
      m.cutoff = c.at("cutoff");
      if (c.contains("confusion")) {
        m.tp = c["confusion"].at("tp");
        m.fp = c["confusion"].at("fp");
        m.fn = c["confusion"].at("fn");
        m.tn = c["confusion"].at("tn");
      }
      if (c.contains("degenerate")) m.degenerate = c["degenerate"].get<std::vector<std::string>>();
      if (c.contains("threshold") && !c["threshold"].is_null()) col.threshold = c["threshold"].get<double>();
      r.columns.push_back(std::move(col));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed metrics report: ") + e.what());
  }
}

/// Cell-wise mean and sample sd over several reports with the same layout.
struct AggregateReport {
  std::vector<std::string> titles;
  std::vector<std::vector<double>> mean;  // [metric][column]
  std::vector<std::vector<double>> sd;
  std::size_t runs = 0;
};

inline AggregateReport aggregate_reports(const std::vector<MetricsReport>& reports) {
  if (reports.empty()) throw EmptyInput("no reports to aggregate");
  AggregateReport agg;
  agg.runs = reports.size();
  for (const auto& c : reports.front().columns) agg.titles.push_back(column_title(c));
  const std::size_t ncol = agg.titles.size();
  for (const auto& r : reports) {
    if (r.columns.size() != ncol) throw ShapeError("reports have different layouts");
    for (std::size_t c = 0; c < ncol; ++c) {
      if (column_title(r.columns[c]) != agg.titles[c]) throw ShapeError("reports have different layouts");
    }
  }
  for (const char* f : kMetricFields) {
    std::vector<double> mean(ncol, 0.0), sd(ncol, 0.0);
    for (std::size_t c = 0; c < ncol; ++c) {
      for (const auto& r : reports) mean[c] += metric_field(r.columns[c].metrics, f);
      mean[c] /= static_cast<double>(reports.size());
      if (reports.size() > 1) {
        for (const auto& r : reports) sd[c] += std::pow(metric_field(r.columns[c].metrics, f) - mean[c], 2);
        sd[c] = std::sqrt(sd[c] / static_cast<double>(reports.size() - 1));
      }
    }
    agg.mean.push_back(std::move(mean));
    agg.sd.push_back(std::move(sd));
  }
  return agg;
}

inline std::string render_text(const AggregateReport& agg) {
  std::vector<std::string> labels(std::begin(kMetricLabels), std::end(kMetricLabels));
  std::vector<std::vector<std::string>> cells;
  for (std::size_t f = 0; f < agg.mean.size(); ++f) {
    std::vector<std::string> row;
    for (std::size_t c = 0; c < agg.titles.size(); ++c) {
      row.push_back(agg.runs > 1 ? detail::fixed4(agg.mean[f][c]) + " ± " + detail::fixed4(agg.sd[f][c])
                                 : detail::fixed4(agg.mean[f][c]));
    }
    cells.push_back(std::move(row));
  }
  return "runs: " + std::to_string(agg.runs) + "\n" + detail::render_grid(agg.titles, labels, cells);
}

inline nlohmann::json to_json_value(const AggregateReport& agg) {
  nlohmann::json cols = nlohmann::json::array();
  for (std::size_t c = 0; c < agg.titles.size(); ++c) {
    nlohmann::json j = {{"title", agg.titles[c]}};
    for (std::size_t f = 0; f < agg.mean.size(); ++f) {
      j[kMetricFields[f]] = {{"mean", agg.mean[f][c]}, {"sd", agg.sd[f][c]}};
    }
    cols.push_back(std::move(j));
  }
  return {{"runs", agg.runs}, {"columns", cols}};
}

}  // namespace fedabc
