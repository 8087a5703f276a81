#include <cmath>

#include <gtest/gtest.h>

#include "fedabc/moae.hpp"
#include "oracles.hpp"

using namespace fedabc;

TEST(MoaeArchitecture, ParameterCountsReproduceReferenceTable) {
  const MoaeArchitecture arch{88, 24};
  const auto layers = arch.layers();
  const int expected[] = {5696, 2080, 792, 800, 2112, 5720, 25};
  for (std::size_t i = 0; i < kLayerCount; ++i) EXPECT_EQ(layers[i].parameter_count(), expected[i]) << layers[i].name;
  EXPECT_EQ(arch.parameter_count(), 17225);
  const auto model = init_moae(88, 24, {1, 0});
  int total = 0;
  for (const auto& l : model.layers) total += static_cast<int>(l.w.size() + l.b.size());
  EXPECT_EQ(total, 17225);
}

TEST(MoaeInit, SmallestShapesRun) {
  const auto m = init_moae(2, 1, {2, 0});
  const auto f = forward(m, Matrix::Ones(1, 2));
  EXPECT_EQ(f.recon.rows(), 1);
  EXPECT_EQ(f.recon.cols(), 2);
  EXPECT_EQ(f.latent.cols(), 1);
  EXPECT_EQ(f.prob.size(), 1);
}

TEST(MoaeInit, DeterministicBySeed) {
  EXPECT_TRUE(init_moae(10, 3, {5, 1}) == init_moae(10, 3, {5, 1}));
  EXPECT_FALSE(init_moae(10, 3, {5, 1}) == init_moae(10, 3, {6, 1}));
}

TEST(MoaeInit, RejectsLatentNotSmallerThanInput) {
  EXPECT_THROW(init_moae(4, 4, {1, 0}), InvalidArchitecture);
  EXPECT_THROW(init_moae(4, 0, {1, 0}), InvalidArchitecture);
}

TEST(MoaeForward, ZeroNetwork) {
  const auto m = zero_model({6, 2});
  const auto f = forward(m, Matrix::Random(4, 6));
  EXPECT_EQ(f.latent.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(f.recon.cwiseAbs().maxCoeff(), 0.0);
  for (Eigen::Index i = 0; i < 4; ++i) EXPECT_EQ(f.prob(i), 0.5);
  EXPECT_EQ(encode(m, Matrix::Random(3, 6)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(MoaeForward, LatentStrictlyInsideUnitInterval) {
  const auto m = init_moae(8, 3, {3, 0});
  Rng rng({3, 1});
  const Matrix x = 50.0 * oracle::random_matrix(20, 8, rng);
  const auto f = forward(m, x);
  EXPECT_LT(f.latent.cwiseAbs().maxCoeff(), 1.0 + 0.0);
  EXPECT_TRUE(((f.prob.array() > 0.0) && (f.prob.array() < 1.0)).all());
}

TEST(MoaeForward, UnitWidthAllOnesAtZero) {
  MoaeModel m = zero_model({1, 1, 1, 1});
  for (auto& l : m.layers) l.w.setOnes();
  const auto f = forward(m, Matrix::Zero(1, 1));
  EXPECT_EQ(f.prob(0), 0.5);
}

TEST(MoaeForward, NonFiniteInputIsNumericError) {
  const auto m = init_moae(3, 1, {1, 0});
  Matrix x = Matrix::Zero(1, 3);
  x(0, 1) = std::nan("");
  EXPECT_THROW(forward(m, x), NumericError);
  EXPECT_THROW(forward(m, Matrix::Zero(1, 4)), ShapeError);
}

TEST(MoaeActivation, SeluConstantsAndContinuity) {
  EXPECT_EQ(act::selu(0.0), 0.0);
  EXPECT_NEAR(act::kSeluLambda, 1.0507, 1e-4);
  EXPECT_NEAR(act::kSeluAlpha, 1.6733, 1e-4);
  EXPECT_NEAR(act::selu(-1e-15), act::selu(1e-15), 1e-12);
  EXPECT_NEAR(act::selu(-2.0), act::kSeluLambda * act::kSeluAlpha * (std::exp(-2.0) - 1.0), 1e-15);
  EXPECT_NEAR(act::selu(-40.0), -act::kSeluLambda * act::kSeluAlpha, 1e-12);
}

TEST(MoaeLoss, PerfectReconstructionWithoutClassifier) {
  Rng rng({4, 0});
  const Matrix x = oracle::random_matrix(5, 3, rng);
  EXPECT_EQ(moae_loss(x, x, Vector::Constant(5, 0.3), {0, 1, 0, 1, 1}, {1.0, 0.0}), 0.0);
}

TEST(MoaeLoss, CrossEntropyAtHalf) {
  const Matrix x = Matrix::Zero(1, 2);
  EXPECT_NEAR(moae_loss(x, x, Vector::Constant(1, 0.5), {1}, {0.0, 3.0}), 3.0 * std::log(2.0), 1e-15);
}

TEST(MoaeLoss, HandArithmetic) {
  Matrix x(2, 1), r(2, 1);
  x << 1, 0;
  r << 0, 0;
  EXPECT_NEAR(moae_loss(r, x, Vector::Constant(2, 0.5), {1, 0}, {1.0, 1.0}), 1.0 + std::log(2.0), 1e-12);
}

TEST(MoaeLoss, SaturatedProbabilityIsClamped) {
  const Matrix x = Matrix::Zero(1, 1);
  const double l = moae_loss(x, x, Vector::Constant(1, 0.0), {1}, {1.0, 1.0});
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, -std::log(1e-12), 1e-9);
}

TEST(MoaeGradient, MatchesFiniteDifferencesForEachTerm) {
  Rng rng({5, 0});
  for (int trial = 0; trial < 5; ++trial) {
    const auto model = oracle::random_small_model(6, 2, rng);
    const Matrix x = oracle::random_matrix(5, 6, rng);
    const auto y = oracle::random_labels(5, rng);
    EXPECT_LT(oracle::max_gradient_relative_error(model, x, y, {1.0, 0.7}), 1e-4);
    EXPECT_LT(oracle::max_gradient_relative_error(model, x, y, {0.0, 0.7}), 1e-4);
    EXPECT_LT(oracle::max_gradient_relative_error(model, x, y, {1.0, 0.0}), 1e-4);
  }
}

TEST(MoaeAdam, ZeroLearningRateLeavesParameters) {
  auto model = init_moae(6, 2, {6, 0});
  const auto before = model;
  Rng rng({6, 1});
  const Matrix x = oracle::random_matrix(8, 6, rng);
  const auto y = oracle::random_labels(8, rng);
  TrainOptions opt;
  opt.epochs = 5;
  opt.adam.lr = 0.0;
  train_moae(model, x, y, opt, rng);
  for (std::size_t i = 0; i < kLayerCount; ++i) {
    EXPECT_EQ(model.layers[i].w, before.layers[i].w);
    EXPECT_EQ(model.layers[i].b, before.layers[i].b);
  }
}

TEST(MoaeTrain, ZeroEpochsIsNoOp) {
  auto model = init_moae(6, 2, {7, 0});
  const auto before = model;
  Rng rng({7, 1});
  TrainOptions opt;
  opt.epochs = 0;
  const auto res = train_moae(model, oracle::random_matrix(4, 6, rng), {0, 1, 0, 1}, opt, rng);
  EXPECT_TRUE(model == before);
  EXPECT_TRUE(res.epoch_loss.empty());
}

TEST(MoaeTrain, SeparableFixtureBypathAccuracy) {
  Rng data_rng({8, 0});
  Matrix x;
  std::vector<int> y;
  oracle::separable_fixture(100, data_rng, x, y);
  auto model = init_moae(2, 1, {8, 1});
  TrainOptions opt;
  opt.epochs = 200;
  opt.batch_size = 10;
  opt.adam.lr = 1e-2;
  opt.weights = {1.0, 1.0};
  Rng rng({8, 2});
  const auto res = train_moae(model, x, y, opt, rng);
  EXPECT_LT(res.epoch_loss.back(), res.initial_loss);
  const auto f = forward(model, x);
  int correct = 0;
  for (int i = 0; i < 100; ++i) correct += (f.prob(i) >= 0.5 ? 1 : 0) == y[i];
  EXPECT_GE(correct, 95);
}

TEST(MoaeTrain, LossTraceIsDeterministic) {
  Rng data_rng({9, 0});
  const Matrix x = oracle::random_matrix(30, 6, data_rng);
  const auto y = oracle::random_labels(30, data_rng);
  TrainOptions opt;
  opt.epochs = 20;
  opt.batch_size = 8;
  auto a = init_moae(6, 2, {9, 1});
  auto b = init_moae(6, 2, {9, 1});
  Rng ra({9, 2}), rb({9, 2});
  EXPECT_EQ(train_moae(a, x, y, opt, ra).epoch_loss, train_moae(b, x, y, opt, rb).epoch_loss);
  EXPECT_TRUE(a == b);
}

TEST(MoaeTrain, DivergenceReportsEpoch) {
  Rng rng({10, 0});
  auto model = init_moae(6, 2, {10, 1});
  const Matrix x = oracle::random_matrix(6, 6, rng);
  TrainOptions opt;
  opt.epochs = 3;
  opt.adam.lr = 1e300;
  try {
    train_moae(model, x, oracle::random_labels(6, rng), opt, rng);
    FAIL() << "expected divergence";
  } catch (const DivergedTraining& e) {
    EXPECT_EQ(e.epoch(), 1);
  }
}

TEST(MoaeEncode, DeterministicShape) {
  const auto m = init_moae(7, 3, {11, 0});
  Rng rng({11, 1});
  const Matrix x = oracle::random_matrix(9, 7, rng);
  const Matrix a = encode(m, x);
  EXPECT_EQ(a, encode(m, x));
  EXPECT_EQ(a.rows(), 9);
  EXPECT_EQ(a.cols(), 3);
  EXPECT_EQ(a, forward(m, x).latent);
}

TEST(MoaeJson, SaveLoadPreservesWeights) {
  const auto m = init_moae(7, 3, {12, 0});
  const auto back = moae_from_json(nlohmann::json::parse(to_json_value(m).dump()));
  EXPECT_TRUE(back == m);
  auto bad = to_json_value(m);
  bad["format"] = "something-else";
  EXPECT_THROW(moae_from_json(bad), DecodeError);
}
