#include <gtest/gtest.h>

#include <random>

#include "helpers.hpp"
#include "oracles.hpp"

using namespace hattrib;

namespace {

Eigen::MatrixXd random_psd(Eigen::Index n, std::mt19937_64& g, double scale = 0.01) {
  std::normal_distribution<double> d(0.0, 1.0);
  Eigen::MatrixXd a(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) a(i, j) = d(g);
  return scale * (a * a.transpose()) / static_cast<double>(n);
}

Eigen::VectorXd random_mu(Eigen::Index n, std::mt19937_64& g) {
  std::uniform_real_distribution<double> u(0.95, 1.05);
  Eigen::VectorXd mu(n);
  for (Eigen::Index i = 0; i < n; ++i) mu(i) = u(g);
  return mu;
}

}  // namespace

TEST(ProjectSimplex, FeasibleIsUnchanged) {
  const Eigen::VectorXd v = Eigen::VectorXd::Constant(3, 1.0 / 3.0);
  EXPECT_TRUE(project_simplex(v).cwiseEqual(v).all());
}

TEST(ProjectSimplex, SymmetricPoint) {
  const Eigen::VectorXd w = project_simplex(Eigen::VectorXd::Constant(3, 0.5));
  EXPECT_TRUE(w.isApprox(Eigen::VectorXd::Constant(3, 1.0 / 3.0), 1e-15));
}

TEST(ProjectSimplex, MatchesBisectionOracleAndIsIdempotent) {
  std::mt19937_64 g(1);
  std::normal_distribution<double> d(0.0, 2.0);
  for (int c = 0; c < 200; ++c) {
    Eigen::VectorXd v(5);
    for (int i = 0; i < 5; ++i) v(i) = d(g);
    const Eigen::VectorXd w = project_simplex(v);
    const auto want = oracle::project_simplex(testutil::to_std(v));
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(w(i), want[i], 1e-8);
    EXPECT_TRUE(on_simplex(w));
    EXPECT_TRUE(project_simplex(w).cwiseEqual(w).all());
  }
}

TEST(ProjectSimplex, RejectsNonFinite) {
  Eigen::VectorXd v(2);
  v << 1.0, std::numeric_limits<double>::infinity();
  try {
    project_simplex(v);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteInput);
  }
}

TEST(Solve, IdentityCovarianceEqualMeansGivesEqualWeights) {
  for (double lambda : {1e-3, 0.5, 10.0}) {
    const MVSolution s = solve({Eigen::VectorXd::Constant(3, 1.1), Eigen::MatrixXd::Identity(3, 3), lambda});
    EXPECT_TRUE(s.weights.values.isApprox(Eigen::VectorXd::Constant(3, 1.0 / 3.0), 1e-9));
  }
}

TEST(Solve, VanishingRiskAversionPicksArgmax) {
  Eigen::VectorXd mu(3);
  mu << 1.0, 1.2, 0.9;
  const MVSolution s = solve({mu, Eigen::MatrixXd::Identity(3, 3), 1e-12});
  EXPECT_NEAR(s.weights.values(1), 1.0, 1e-9);
}

TEST(Solve, FlatObjectiveKeepsStartingPoint) {
  const MVSolution s = solve({Eigen::VectorXd::Constant(3, 1.0), Eigen::MatrixXd::Zero(3, 3), 1e-12});
  EXPECT_TRUE(on_simplex(s.weights.values, 1e-15));
  EXPECT_TRUE(s.weights.values.isApprox(Eigen::VectorXd::Constant(3, 1.0 / 3.0), 1e-15));
}

TEST(Solve, TiedWinnersShareWeight) {
  // With lambda > 0 the optimum is unique: tied means split evenly.
  Eigen::VectorXd mu(3);
  mu << 1.2, 0.9, 1.2;
  const MVSolution s = solve({mu, Eigen::MatrixXd::Identity(3, 3), 1e-12});
  EXPECT_NEAR(s.weights.values(0), 0.5, 1e-9);
  EXPECT_NEAR(s.weights.values(2), 0.5, 1e-9);
}

TEST(Solve, HugeStepsStayOnSimplex) {
  Eigen::VectorXd mu(4);
  mu << 1.0, 1.3, 0.7, 1.29;
  for (double lambda : {1e-12, 1e-9, 1e-6}) {
    const MVSolution s = solve({mu, 1e-4 * Eigen::MatrixXd::Identity(4, 4), lambda});
    EXPECT_TRUE(on_simplex(s.weights.values, 1e-12)) << lambda;
    EXPECT_NEAR(s.weights.values(1), 1.0, 1e-6) << lambda;
  }
}

TEST(Solve, MatchesGridOracle) {
  std::mt19937_64 g(7);
  for (int c = 0; c < 25; ++c) {
    const MVProblem p{random_mu(4, g), random_psd(4, g, 0.2), 0.5};
    const MVSolution s = solve(p);
    std::vector<std::vector<double>> sig(4, std::vector<double>(4));
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) sig[i][j] = p.sigma(i, j);
    const double want = oracle::mv_grid_max(testutil::to_std(p.mu), sig, 0.5);
    EXPECT_GE(s.objective, want - 1e-6);
    EXPECT_TRUE(on_simplex(s.weights.values));
  }
}

TEST(Solve, BeatsEqualWeightsAndSatisfiesKkt) {
  std::mt19937_64 g(8);
  for (int c = 0; c < 200; ++c) {
    const Eigen::Index n = 2 + c % 10;
    const MVProblem p{random_mu(n, g), random_psd(n, g, 0.05 + 0.01 * (c % 7)), 0.5};
    const MVSolution s = solve(p);
    const Eigen::VectorXd eq = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
    EXPECT_GE(s.objective, mv_objective(p, eq) - 1e-15);
    EXPECT_TRUE(on_simplex(s.weights.values));
    const Eigen::VectorXd grad = mv_gradient(p, s.weights.values);
    double gmax = -1e300, gmin = 1e300;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (s.weights.values(i) > 1e-6) {
        gmax = std::max(gmax, grad(i));
        gmin = std::min(gmin, grad(i));
      }
    }
    EXPECT_LE(gmax - gmin, 1e-5) << "case " << c;
  }
}

TEST(Solve, RiskFallsAsLambdaGrows) {
  std::mt19937_64 g(9);
  for (int c = 0; c < 50; ++c) {
    const Eigen::VectorXd mu = random_mu(5, g);
    const Eigen::MatrixXd sig = random_psd(5, g, 0.1);
    double prev = std::numeric_limits<double>::infinity();
    for (double lambda : {0.05, 0.2, 0.5, 1.0, 4.0, 20.0}) {
      const Eigen::VectorXd w = solve({mu, sig, lambda}).weights.values;
      const double risk = w.dot(sig * w);
      EXPECT_LE(risk, prev + 1e-9);
      prev = risk;
    }
  }
}

TEST(Solve, ValidatesProblem) {
  EXPECT_THROW(solve({Eigen::VectorXd::Ones(2), Eigen::MatrixXd::Identity(3, 3), 0.5}), Error);
  EXPECT_THROW(solve({Eigen::VectorXd::Ones(2), Eigen::MatrixXd::Identity(2, 2), 0.0}), Error);
}

TEST(HindsightWeights, IdenticalAssetsGetEqualWeights) {
  RelativeVector y{5, Eigen::VectorXd::Constant(4, 1.01)};
  CovEstimate c;
  c.slot = 5;
  c.matrix = Eigen::MatrixXd::Constant(4, 4, 1e-4) + 1e-4 * Eigen::MatrixXd::Identity(4, 4);
  const MVSolution s = hindsight_weights(y, c, 0.5);
  EXPECT_TRUE(s.weights.values.isApprox(Eigen::VectorXd::Constant(4, 0.25), 1e-9));
  EXPECT_EQ(s.weights.slot, 5u);
}

TEST(HindsightWeights, WinnerTakesAllWithoutRiskAversion) {
  RelativeVector y{1, Eigen::VectorXd::Ones(3)};
  y.values(2) = 1.5;
  CovEstimate c;
  c.matrix = 0.01 * Eigen::MatrixXd::Identity(3, 3);
  EXPECT_NEAR(hindsight_weights(y, c, 1e-12).weights.values(2), 1.0, 1e-9);
}

TEST(HindsightWeights, IsSolveOnRealizedInputs) {
  const PricePanel p = testutil::random_panel(3, 40, 4);
  const RelativeVector y = price_relatives(p, 30);
  const CovEstimate c = realized_covariance(p, 30, 20);
  const MVSolution a = hindsight_weights(y, c, 0.5);
  const MVSolution b = solve({y.values, c.matrix, 0.5});
  EXPECT_TRUE(a.weights.values.cwiseEqual(b.weights.values).all());
}
