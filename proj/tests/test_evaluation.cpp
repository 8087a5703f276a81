#include <gtest/gtest.h>

#include "fedabc/evaluation.hpp"

using namespace fedabc;

namespace {

std::vector<int> expand(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn, std::vector<int>& y) {
  std::vector<int> pred;
  auto push = [&](std::size_t n, int p, int t) {
    for (std::size_t i = 0; i < n; ++i) {
      pred.push_back(p);
      y.push_back(t);
    }
  };
  push(tp, 1, 1);
  push(fp, 1, 0);
  push(fn, 0, 1);
  push(tn, 0, 0);
  return pred;
}

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

/// Two Gaussian blobs in `d` dims with the minority shifted along the first axis.
void blobs(Eigen::Index major, Eigen::Index minor, Eigen::Index d, double shift, Rng& rng, Matrix& x,
           std::vector<int>& y) {
  x.resize(major + minor, d);
  y.clear();
  for (Eigen::Index i = 0; i < major + minor; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = 0.3 * rng.normal();
    const int label = i >= major ? 1 : 0;
    if (label) x(i, 0) += shift;
    y.push_back(label);
  }
}

}  // namespace

TEST(Metrics, ConfusionArithmetic) {
  std::vector<int> y;
  const auto pred = expand(5, 5, 5, 25, y);
  const auto m = compute_metrics(pred, y);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.75);
  EXPECT_DOUBLE_EQ(m.precision, 0.5);
  EXPECT_DOUBLE_EQ(m.recall, 0.5);
  EXPECT_DOUBLE_EQ(m.f1, 0.5);
  EXPECT_DOUBLE_EQ(m.specificity, 25.0 / 30.0);
  EXPECT_TRUE(m.degenerate.empty());
}

TEST(Metrics, F1FromPrecisionRecall) {
  EXPECT_NEAR(f1_score(3.0 / 7.0, 0.5), 0.4615, 5e-5);
  // The 4-d.p. inputs carry up to 5e-5 rounding error of their own.
  EXPECT_NEAR(f1_score(0.4286, 0.5), 0.4615, 1e-4);
  EXPECT_EQ(f1_score(0.0, 0.0), 0.0);
}

TEST(Metrics, ZeroDivisionIsFlagged) {
  std::vector<int> y;
  const auto pred = expand(0, 0, 4, 36, y);
  const auto m = compute_metrics(pred, y);
  EXPECT_EQ(m.precision, 0.0);
  EXPECT_EQ(m.f1, 0.0);
  ASSERT_EQ(m.degenerate.size(), 1u);
  EXPECT_EQ(m.degenerate[0], "precision");
}

TEST(Metrics, SiteOneGlobalConfusion) {
  // 40 test rows, 6 positive: 3 TP, 4 FP.
  std::vector<int> y;
  const auto m = compute_metrics(expand(3, 4, 3, 30, y), y);
  EXPECT_NEAR(m.accuracy, 0.8250, 5e-5);
  EXPECT_NEAR(m.specificity, 0.8824, 5e-5);
  EXPECT_NEAR(m.precision, 0.4286, 5e-5);
  EXPECT_NEAR(m.f1, 0.4615, 5e-5);
}

TEST(Cutoff, HandEnumeratedExample) {
  const auto c = select_cutoff(vec({0.9, 0.8, 0.3, 0.2}), {1, 0, 1, 0});
  EXPECT_DOUBLE_EQ(c.cutoff, 0.3);
  EXPECT_DOUBLE_EQ(c.f1, 0.8);
}

TEST(Cutoff, PerfectRankingAndTies) {
  const auto c = select_cutoff(vec({0.95, 0.7, 0.6, 0.4, 0.1}), {1, 1, 1, 0, 0});
  EXPECT_DOUBLE_EQ(c.cutoff, 0.6);
  EXPECT_DOUBLE_EQ(c.f1, 1.0);
  const auto flat = select_cutoff(vec({0.5, 0.5, 0.5}), {1, 0, 0});
  EXPECT_DOUBLE_EQ(flat.cutoff, 0.5);
  EXPECT_EQ(apply_cutoff(vec({0.5, 0.5, 0.5}), flat.cutoff), (std::vector<int>{1, 1, 1}));
}

TEST(Cutoff, TieGoesToSmallest) {
  // c = 0.8 and c = 0.2 both give F1 = 2/3.
  const auto c = select_cutoff(vec({0.8, 0.5, 0.2}), {1, 0, 1});
  EXPECT_DOUBLE_EQ(c.cutoff, 0.2);
}

TEST(Cutoff, NoPositivesIsAnError) {
  EXPECT_THROW(select_cutoff(vec({0.2, 0.3}), {0, 0}), InsufficientData);
}

TEST(Cutoff, MonotoneTransformInvariance) {
  Rng rng({3, 0});
  Vector p(50);
  std::vector<int> y;
  for (Eigen::Index i = 0; i < 50; ++i) {
    p(i) = rng.uniform_open();
    y.push_back(rng.uniform() < p(i) ? 1 : 0);
  }
  const auto a = select_cutoff(p, y);
  const Vector q = p.array().square();
  const auto b = select_cutoff(q, y);
  EXPECT_DOUBLE_EQ(b.cutoff, a.cutoff * a.cutoff);
  EXPECT_EQ(apply_cutoff(p, a.cutoff), apply_cutoff(q, b.cutoff));
}

TEST(LogReg, SeparableFixture) {
  Rng rng({4, 0});
  Matrix x;
  std::vector<int> y;
  blobs(40, 10, 2, 3.0, rng, x, y);
  const auto model = train_logreg(x, y);
  const Vector p = model.predict_proba(x);
  const auto cut = select_cutoff(p, y);
  EXPECT_DOUBLE_EQ(compute_metrics(apply_cutoff(p, cut.cutoff), y).accuracy, 1.0);
}

TEST(LogReg, LossNeverIncreases) {
  Rng rng({5, 0});
  Matrix x;
  std::vector<int> y;
  blobs(30, 10, 4, 0.5, rng, x, y);
  double prev = 1e300;
  for (int iters : {0, 1, 5, 20, 100, 500}) {
    LogRegOptions opt;
    opt.iters = iters;
    opt.lr = 50.0;
    const double loss = train_logreg(x, y, opt).final_loss;
    EXPECT_LE(loss, prev + 1e-12);
    prev = loss;
  }
}

TEST(LogReg, SingleClassLabels) {
  Rng rng({6, 0});
  Matrix x;
  std::vector<int> y;
  blobs(20, 0, 3, 0.0, rng, x, y);
  const auto model = train_logreg(x, y);
  EXPECT_LT(model.predict_proba(x).maxCoeff(), 0.5);
  const auto m = compute_metrics(apply_cutoff(model.predict_proba(x), 0.5), y);
  EXPECT_DOUBLE_EQ(m.accuracy, 1.0);
  EXPECT_FALSE(m.degenerate.empty());
}

TEST(LogReg, HeavyPenaltyShrinksWeights) {
  Rng rng({7, 0});
  Matrix x;
  std::vector<int> y;
  blobs(25, 25, 3, 2.0, rng, x, y);
  LogRegOptions opt;
  opt.l2 = 1e6;
  const auto model = train_logreg(x, y, opt);
  EXPECT_LT(model.w.norm(), 1e-5);
  EXPECT_NEAR(model.predict_proba(x).mean(), 0.5, 1e-6);
}

TEST(LogReg, RejectsNonFiniteInput) {
  Matrix x = Matrix::Zero(3, 2);
  x(1, 1) = std::nan("");
  EXPECT_THROW(train_logreg(x, {0, 1, 0}), NumericError);
}

TEST(LocalOversample, CountsAndShape) {
  Rng rng({8, 0});
  Matrix minority(9, 24);
  for (Eigen::Index i = 0; i < minority.size(); ++i) minority.data()[i] = std::tanh(rng.normal());
  EXPECT_EQ(local_components_for(9), 8);
  const std::size_t needed = 51 - 9;
  const Matrix rows = oversample_local_gmm(minority, local_components_for(9), needed, rng);
  EXPECT_EQ(rows.rows(), 42);
  EXPECT_EQ(rows.cols(), 24);
  EXPECT_TRUE(rows.allFinite());
  EXPECT_EQ(oversample_local_gmm(minority, 8, 0, rng).rows(), 0);
  EXPECT_THROW(oversample_local_gmm(minority.topRows(3), 8, 5, rng), InsufficientData);
}

namespace {

EvaluationArtifacts toy_artifacts(Rng& rng, bool with_abc) {
  EvaluationArtifacts art;
  art.epsilon = 8.0;
  const Eigen::Index majors[] = {51, 46, 62}, minors[] = {9, 8, 10};
  for (int s = 0; s < 3; ++s) {
    SiteArtifacts site;
    blobs(majors[s], minors[s], 4, 1.5, rng, site.train_latent, site.train_y);
    blobs(majors[s] * 2 / 3, minors[s] * 2 / 3, 4, 1.5, rng, site.test_latent, site.test_y);
    site.global_train_latent = site.train_latent;
    site.global_test_latent = site.test_latent;
    if (with_abc) {
      Matrix extra(majors[s] - minors[s], 4);
      for (Eigen::Index i = 0; i < extra.size(); ++i) extra.data()[i] = 0.3 * rng.normal();
      extra.col(0).array() += 1.5;
      site.abc_oversamples = extra;
    }
    art.sites.push_back(std::move(site));
  }
  return art;
}

}  // namespace

TEST(RunCondition, AllConditionsProduceRows) {
  Rng rng({9, 0});
  const auto art = toy_artifacts(rng, true);
  MetricsReport report;
  for (Condition c : kAllConditions) {
    auto rows = run_condition(c, art, {}, {9, 1});
    ASSERT_EQ(rows.size(), 3u);
    for (auto& r : rows) {
      EXPECT_GE(r.metrics.f1, 0.0);
      EXPECT_LE(r.metrics.f1, 1.0);
      EXPECT_NEAR(r.metrics.f1, f1_score(r.metrics.precision, r.metrics.recall), 5e-5);
      EXPECT_EQ(r.threshold.has_value(), c == Condition::Abc);
      report.columns.push_back(std::move(r));
    }
  }
  sort_columns(report.columns);
  EXPECT_EQ(report.columns.size(), 12u);
  EXPECT_EQ(column_title(report.columns[0]), "Global Site 1");
  EXPECT_EQ(column_title(report.columns[3]), "Site 1 ABC");
  // Global uses one shared cut-off.
  EXPECT_EQ(report.find(0, Condition::Global)->metrics.cutoff, report.find(2, Condition::Global)->metrics.cutoff);
}

TEST(RunCondition, MissingArtifactsAreDescriptive) {
  Rng rng({10, 0});
  auto art = toy_artifacts(rng, false);
  EXPECT_THROW(run_condition(Condition::Abc, art, {}, {1, 0}), NoPosterior);
  art.sites[1].global_test_latent.reset();
  EXPECT_THROW(run_condition(Condition::Global, art, {}, {1, 0}), InsufficientData);
  art.sites[0].abc_oversamples = Matrix::Zero(3, 4);
  EXPECT_THROW(run_condition(Condition::Abc, art, {}, {1, 0}), ShapeError);
}

TEST(RunCondition, OversampledIsDeterministic) {
  Rng rng({11, 0});
  const auto art = toy_artifacts(rng, false);
  const auto a = run_condition(Condition::Oversampled, art, {}, {5, 5});
  const auto b = run_condition(Condition::Oversampled, art, {}, {5, 5});
  for (std::size_t s = 0; s < 3; ++s) EXPECT_EQ(a[s].metrics.f1, b[s].metrics.f1);
}

TEST(Report, TextLayoutAndJsonRoundTrip) {
  Rng rng({12, 0});
  const auto art = toy_artifacts(rng, true);
  MetricsReport report;
  for (Condition c : kAllConditions) {
    for (auto& r : run_condition(c, art, {}, {1, 1})) report.columns.push_back(std::move(r));
  }
  sort_columns(report.columns);
  report.provenance = {{"seed", 1}};
  const std::string text = render_text(report);
  for (const char* label : {"Accuracy", "Sensitivity", "Specificity", "Precision", "Recall", "F1", "Threshold",
                            "Cut-off", "Global Site 3", "Site 2 OS"}) {
    EXPECT_NE(text.find(label), std::string::npos) << label;
  }
  EXPECT_NE(text.find("8.0000"), std::string::npos);
  const auto back = report_from_json(to_json_value(report));
  EXPECT_EQ(to_json_value(back), to_json_value(report));

  const auto agg = aggregate_reports({report, report});
  EXPECT_EQ(agg.runs, 2u);
  EXPECT_EQ(agg.sd[5][0], 0.0);
  EXPECT_EQ(agg.mean[5][0], report.columns[0].metrics.f1);
  EXPECT_NE(render_text(agg).find("±"), std::string::npos);
}
