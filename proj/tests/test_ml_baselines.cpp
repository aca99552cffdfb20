#include <gtest/gtest.h>

#include <random>

#include "helpers.hpp"
#include "oracles.hpp"

using namespace hattrib;

namespace {

Eigen::MatrixXd random_x(Eigen::Index n, Eigen::Index k, std::mt19937_64& g) {
  std::normal_distribution<double> d(0.0, 1.0);
  Eigen::MatrixXd x(n, k);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < k; ++j) x(i, j) = d(g);
  return x;
}

Eigen::VectorXd predict_all(const RegressorModel& m, const Eigen::MatrixXd& x) { return predict_returns(m, x); }

double r_squared(const Eigen::VectorXd& y, const Eigen::VectorXd& yhat) {
  const double sst = (y.array() - y.mean()).square().sum();
  return 1.0 - (y - yhat).squaredNorm() / sst;
}

}  // namespace

TEST(LinearRegression, ExactRecovery) {
  std::mt19937_64 g(1);
  const Eigen::MatrixXd x = random_x(50, 3, g);
  const Eigen::Vector3d beta(0.5, -2.0, 0.25);
  const RegressorModel m = fit(ModelKind::LinearRegression, x, (x * beta).array() + 1.5);
  const auto& lr = std::get<LinearRegression>(m.fitted);
  EXPECT_NEAR(lr.intercept, 1.5, 1e-12);
  EXPECT_TRUE(lr.coefs.isApprox(beta, 1e-12));
}

TEST(LinearRegression, MatchesNormalEquationsOracle) {
  std::mt19937_64 g(2);
  const Eigen::MatrixXd x = random_x(40, 3, g);
  const Eigen::VectorXd y = random_x(40, 1, g).col(0);
  std::vector<std::vector<double>> a(4, std::vector<double>(4, 0.0));
  std::vector<double> b(4, 0.0);
  for (int i = 0; i < 40; ++i) {
    const double row[4] = {1.0, x(i, 0), x(i, 1), x(i, 2)};
    for (int p = 0; p < 4; ++p) {
      b[p] += row[p] * y(i);
      for (int q = 0; q < 4; ++q) a[p][q] += row[p] * row[q];
    }
  }
  const auto want = oracle::solve_dense(a, b);
  const auto lr = std::get<LinearRegression>(fit(ModelKind::LinearRegression, x, y).fitted);
  EXPECT_NEAR(lr.intercept, want[0], 1e-12);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(lr.coefs(k), want[k + 1], 1e-12);
}

TEST(LinearRegression, RankDeficientIsReported) {
  Eigen::MatrixXd x(5, 2);
  x << 1, 2, 2, 4, 3, 6, 4, 8, 5, 10;
  try {
    fit(ModelKind::LinearRegression, x, Eigen::VectorXd::LinSpaced(5, 0, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::RankDeficient);
  }
}

TEST(DecisionTree, StumpSplitsAtMidpoint) {
  Eigen::MatrixXd x(6, 1);
  x << 1, 2, 3, 10, 11, 12;
  Eigen::VectorXd y(6);
  y << 0, 0, 0, 5, 5, 5;
  MLParams p;
  p.max_depth = 1;
  p.min_leaf = 1;
  const RegressorModel m = fit(ModelKind::DecisionTree, x, y, p);
  const auto& t = std::get<DecisionTree>(m.fitted);
  ASSERT_EQ(t.nodes.size(), 3u);
  EXPECT_EQ(t.nodes[0].feature, 0);
  EXPECT_DOUBLE_EQ(t.nodes[0].threshold, 6.5);
  EXPECT_DOUBLE_EQ(m.predict(Eigen::RowVectorXd::Constant(1, 6.5)), 0.0);
  EXPECT_DOUBLE_EQ(m.predict(Eigen::RowVectorXd::Constant(1, 6.6)), 5.0);
}

TEST(DecisionTree, ChoosesInformativeFeature) {
  std::mt19937_64 g(3);
  Eigen::MatrixXd x = random_x(200, 3, g);
  const Eigen::VectorXd y = (x.col(2).array() > 0.3).cast<double>();
  MLParams p;
  p.max_depth = 1;
  p.min_leaf = 1;
  const auto t = std::get<DecisionTree>(fit(ModelKind::DecisionTree, x, y, p).fitted);
  EXPECT_EQ(t.nodes[0].feature, 2);
  EXPECT_NEAR(t.nodes[0].threshold, 0.3, 0.05);
}

TEST(DecisionTree, RespectsDepthAndLeafSize) {
  std::mt19937_64 g(4);
  const Eigen::MatrixXd x = random_x(300, 2, g);
  const Eigen::VectorXd y = x.col(0).array().sin() + x.col(1).array();
  MLParams p;
  p.max_depth = 3;
  p.min_leaf = 25;
  const auto t = std::get<DecisionTree>(fit(ModelKind::DecisionTree, x, y, p).fitted);
  // Count samples per leaf and depth of each leaf.
  std::vector<int> count(t.nodes.size(), 0);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    int n = 0, depth = 0;
    while (t.nodes[n].feature >= 0) {
      n = x(i, t.nodes[n].feature) <= t.nodes[n].threshold ? t.nodes[n].left : t.nodes[n].right;
      ++depth;
    }
    ASSERT_LE(depth, 3);
    ++count[n];
  }
  for (std::size_t n = 0; n < t.nodes.size(); ++n) {
    if (t.nodes[n].feature < 0) {
      EXPECT_GE(count[n], 25);
    }
  }
}

TEST(DecisionTree, LeafValuesAreMeansAndConstantTargetGivesOneLeaf) {
  std::mt19937_64 g(5);
  const Eigen::MatrixXd x = random_x(30, 2, g);
  const auto t = std::get<DecisionTree>(fit(ModelKind::DecisionTree, x, Eigen::VectorXd::Constant(30, 2.5)).fitted);
  ASSERT_EQ(t.nodes.size(), 1u);
  EXPECT_EQ(t.nodes[0].value, 2.5);
}

TEST(RandomForest, SingleFullTreeEqualsDecisionTree) {
  std::mt19937_64 g(6);
  const Eigen::MatrixXd x = random_x(120, 4, g);
  const Eigen::VectorXd y = x.col(1) - 0.5 * x.col(3);
  MLParams p;
  p.n_trees = 1;
  p.bootstrap = false;
  p.max_features = 4;
  const RegressorModel rf = fit(ModelKind::RandomForest, x, y, p, 9);
  const RegressorModel dt = fit(ModelKind::DecisionTree, x, y, p);
  const Eigen::MatrixXd probe = random_x(50, 4, g);
  EXPECT_TRUE(predict_all(rf, probe).cwiseEqual(predict_all(dt, probe)).all());
}

TEST(RandomForest, AverageOfTreesAndSeedDeterminism) {
  std::mt19937_64 g(7);
  const Eigen::MatrixXd x = random_x(150, 3, g);
  const Eigen::VectorXd y = x.col(0).array().square() + 0.1 * x.col(2).array();
  MLParams p;
  p.n_trees = 7;
  const RegressorModel a = fit(ModelKind::RandomForest, x, y, p, 1);
  const RegressorModel b = fit(ModelKind::RandomForest, x, y, p, 1);
  const RegressorModel c = fit(ModelKind::RandomForest, x, y, p, 2);
  const auto& rf = std::get<RandomForest>(a.fitted);
  ASSERT_EQ(rf.trees.size(), 7u);
  const Eigen::RowVectorXd q = x.row(3);
  double s = 0;
  for (const auto& t : rf.trees) s += t.predict(q);
  EXPECT_NEAR(a.predict(q), s / 7.0, 1e-15);
  EXPECT_EQ(model_to_json(a).dump(), model_to_json(b).dump());
  EXPECT_NE(model_to_json(a).dump(), model_to_json(c).dump());
}

TEST(LinearSvr, TraceIsMonotoneAndFitsLinearSignal) {
  std::mt19937_64 g(8);
  std::normal_distribution<double> noise(0.0, 0.01);
  const Eigen::MatrixXd x = random_x(400, 2, g);
  Eigen::VectorXd y = 1.0 + 0.05 * x.col(0).array() - 0.02 * x.col(1).array();
  for (Eigen::Index i = 0; i < y.size(); ++i) y(i) += noise(g);
  const RegressorModel m = fit(ModelKind::LinearSVR, x, y);
  const auto& s = std::get<LinearSVR>(m.fitted);
  ASSERT_EQ(s.objective_trace.size(), 300u);
  for (std::size_t e = 1; e < s.objective_trace.size(); ++e) EXPECT_LE(s.objective_trace[e], s.objective_trace[e - 1]);
  EXPECT_GT(r_squared(y, predict_all(m, x)), 0.8);
}

TEST(LinearSvr, ConstantTargetIsRejected) {
  std::mt19937_64 g(9);
  try {
    fit(ModelKind::LinearSVR, random_x(20, 2, g), Eigen::VectorXd::Ones(20));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateTarget);
  }
}

TEST(Models, InSampleRSquaredIsNonNegative) {
  std::mt19937_64 g(10);
  for (int c = 0; c < 5; ++c) {
    const Eigen::MatrixXd x = random_x(200, 3, g);
    const Eigen::VectorXd y = 0.3 * x.col(0) + random_x(200, 1, g).col(0);
    for (ModelKind k : {ModelKind::LinearRegression, ModelKind::DecisionTree, ModelKind::RandomForest})
      EXPECT_GE(r_squared(y, predict_all(fit(k, x, y, {}, 3), x)), 0.0) << to_string(k);
  }
}

TEST(Models, InputValidation) {
  std::mt19937_64 g(11);
  const Eigen::MatrixXd x = random_x(10, 2, g);
  EXPECT_THROW(fit(ModelKind::DecisionTree, x.topRows(1), Eigen::VectorXd::Ones(1)), Error);
  EXPECT_THROW(fit(ModelKind::DecisionTree, x, Eigen::VectorXd::Ones(9)), Error);
  Eigen::MatrixXd bad = x;
  bad(0, 0) = std::nan("");
  EXPECT_THROW(fit(ModelKind::DecisionTree, bad, Eigen::VectorXd::Ones(10)), Error);
  RegressorModel empty;
  EXPECT_THROW(empty.predict(Eigen::RowVectorXd::Zero(2)), Error);
  EXPECT_THROW(model_kind_from_string("xgb"), Error);
}

TEST(Models, DumpRoundTripPredictsIdentically) {
  std::mt19937_64 g(12);
  const Eigen::MatrixXd x = random_x(150, 3, g);
  const Eigen::VectorXd y = 1.0 + 0.01 * x.col(0).array() + 0.001 * x.col(1).array().square();
  MLParams p;
  p.n_trees = 5;
  p.svr_epochs = 50;
  const Eigen::MatrixXd probe = random_x(40, 3, g);
  for (ModelKind k : {ModelKind::LinearRegression, ModelKind::DecisionTree, ModelKind::RandomForest,
                      ModelKind::LinearSVR}) {
    const RegressorModel m = fit(k, x, y, p, 4);
    const RegressorModel back = model_from_json(nlohmann::json::parse(model_to_json(m).dump()));
    EXPECT_EQ(back.kind, k);
    EXPECT_TRUE(predict_all(back, probe).cwiseEqual(predict_all(m, probe)).all()) << to_string(k);
  }
  nlohmann::json j = model_to_json(fit(ModelKind::DecisionTree, x, y, p));
  j["tree"][0][2] = 999;
  EXPECT_THROW(model_from_json(j), Error);
}

TEST(TrainingSet, RowsAreSlotMajor) {
  SyntheticConfig c;
  c.num_assets = 4;
  c.num_slots = 60;
  c.features = {{"a", 0.5, 0.01, true}, {"b", 0.0, 0.0, true}};
  const SyntheticMarket m = generate_market(c);
  const TrainingSet ts = make_training_set(m.panel, m.features, 10, 14);
  ASSERT_EQ(ts.x.rows(), 20);
  EXPECT_TRUE(ts.x.row(4 * 2 + 3).cwiseEqual(features_known_at(m.features, 12).row(3)).all());
  EXPECT_EQ(ts.y(4 * 2 + 3), price_relatives(m.panel, 12).values(3));
  EXPECT_THROW(make_training_set(m.panel, m.features, 0, 5), Error);
}

TEST(MlStrategy, WeightsSolveThePredictedProblem) {
  SyntheticConfig c;
  c.num_assets = 5;
  c.num_slots = 120;
  const SyntheticMarket m = generate_market(c);
  const TrainingSet ts = make_training_set(m.panel, m.features, 30, 100);
  const RegressorModel model = fit(ModelKind::LinearRegression, ts.x, ts.y);
  const std::size_t t = 110;
  const Eigen::MatrixXd f = features_known_at(m.features, t);
  const CovEstimate sig = sample_covariance(m.panel, t, 20);
  const PortfolioWeights w = ml_strategy_weights(model, f, sig, 0.5);
  EXPECT_TRUE(on_simplex(w.values));
  EXPECT_EQ(w.slot, t);
  EXPECT_TRUE(w.values.cwiseEqual(solve({predict_returns(model, f), sig.matrix, 0.5}).weights.values).all());
}

TEST(MlFeatureWeights, IsReferenceFormulaOnStrategyWeights) {
  std::mt19937_64 g(13);
  const Eigen::MatrixXd f = random_x(10, 3, g);
  const Eigen::VectorXd w = Eigen::VectorXd::Constant(10, 0.1);
  const Eigen::VectorXd y = (1.0 + 0.01 * f.col(0).array()).matrix();
  const Eigen::VectorXd b = ml_feature_weights(w, y, f);
  const RegressionFit fit_ = cross_sectional_ols(w.cwiseProduct(y), f);
  EXPECT_TRUE(b.cwiseEqual(reference_feature_weights(fit_, f)).all());
  EXPECT_NEAR(fit_.coefs(0), 0.001, 1e-12);
}
