#include <gtest/gtest.h>

#include <random>

#include "helpers.hpp"
#include "oracles.hpp"

using namespace hattrib;

namespace {

// Book over slots 1..len with random states and fixed relatives.
std::shared_ptr<StateBook> toy_book(std::size_t len, const Eigen::VectorXd& rel, std::uint64_t seed) {
  auto b = std::make_shared<StateBook>();
  b->t_start = 1;
  b->t_end = len;
  b->num_assets = rel.size();
  b->num_features = 1;
  Rng rng(seed);
  for (std::size_t t = 0; t < len; ++t) {
    Eigen::VectorXd s(b->state_dim());
    for (Eigen::Index i = 0; i < s.size(); ++i) s(i) = rng.normal();
    b->states.push_back(s);
    b->relatives.push_back(rel);
  }
  return b;
}

double beta_fn(double a, double b) { return std::tgamma(a) * std::tgamma(b) / std::tgamma(a + b); }

AgentConfig small_config() {
  AgentConfig c;
  c.hidden = {8};
  c.rollout = 16;
  c.minibatch = 8;
  return c;
}

}  // namespace

TEST(PortfolioEnv, RewardIsLogGrowth) {
  Eigen::Vector2d y(1.1, 0.8);
  PortfolioEnv env(toy_book(2, y, 0));
  EXPECT_EQ(env.cursor(), 1u);
  const StepResult r = env.step(Eigen::Vector2d(0.25, 0.75));
  EXPECT_NEAR(r.reward, std::log(0.25 * 1.1 + 0.75 * 0.8), 1e-15);
  EXPECT_FALSE(r.done);
  EXPECT_TRUE(env.step(Eigen::Vector2d(1.0, 0.0)).done);
  EXPECT_TRUE(env.finished());
  try {
    env.step(Eigen::Vector2d(0.5, 0.5));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EpisodeFinished);
  }
  env.reset();
  EXPECT_EQ(env.cursor(), 1u);
  EXPECT_THROW(env.step(Eigen::Vector2d(0.7, 0.7)), Error);
  EXPECT_THROW(env.step(Eigen::Vector3d(0.2, 0.3, 0.5)), Error);
}

TEST(PortfolioEnv, StateBookMatchesBuildState) {
  const PricePanel p = testutil::random_panel(3, 50, 2);
  FeatureTensor ft;
  ft.names = {"x"};
  ft.tickers = p.tickers;
  ft.dates = p.dates;
  ft.values = {p.close};
  ft.valid_from = {0};
  ft.degenerate = {0};
  const StateBook b = make_state_book(p, ft, 30, 35, 20);
  ASSERT_EQ(b.states.size(), 6u);
  EXPECT_EQ(b.state_dim(), 3 * 4);
  EXPECT_TRUE(b.state(32).cwiseEqual(flatten_state(build_state(p, ft, 32, 20))).all());
  EXPECT_TRUE(b.relative(35).cwiseEqual(price_relatives(p, 35).values).all());
  EXPECT_THROW(make_state_book(p, ft, 30, 50, 20), Error);
}

TEST(Advantage, HandValues) {
  EXPECT_DOUBLE_EQ(advantage(0.1, 0.9, 2.0, 1.5), 0.1 + 1.8 - 1.5);
  EXPECT_DOUBLE_EQ(advantage(0.1, 0.9, 0.0, 1.5), -1.4);
}

TEST(PpoClip, TableValues) {
  EXPECT_DOUBLE_EQ(ppo_clip_objective(1.5, 1.0, 0.2), 1.2);
  EXPECT_DOUBLE_EQ(ppo_clip_objective(0.5, 1.0, 0.2), 0.5);
  EXPECT_DOUBLE_EQ(ppo_clip_objective(1.5, -1.0, 0.2), -1.5);
  EXPECT_DOUBLE_EQ(ppo_clip_objective(0.5, -1.0, 0.2), -0.8);
  EXPECT_DOUBLE_EQ(ppo_clip_objective(1.0, 3.0, 0.2), 3.0);
}

TEST(PpoClip, DerivativeMatchesFiniteDifferences) {
  for (double adv : {-2.0, -0.3, 0.7, 1.5})
    for (double r : {0.3, 0.7, 0.9, 1.0 + 1e-3, 1.1, 1.3, 2.0}) {
      const double fd = oracle::central_diff([&](double x) { return ppo_clip_objective(x, adv, 0.2); }, r, 1e-7);
      EXPECT_NEAR(ppo_clip_objective_dratio(r, adv, 0.2), fd, 1e-6) << r << " " << adv;
    }
}

TEST(Dirichlet, TwoDimensionalCaseIsBetaDensity) {
  for (auto [a, b] : {std::pair{2.0, 3.0}, {0.7, 1.4}, {5.5, 5.5}}) {
    for (double x : {0.1, 0.4, 0.85}) {
      const double want = std::log(std::pow(x, a - 1) * std::pow(1 - x, b - 1) / beta_fn(a, b));
      EXPECT_NEAR(dirichlet_log_density(Eigen::Vector2d(a, b), Eigen::Vector2d(x, 1 - x)), want, 1e-12);
    }
  }
}

TEST(Dirichlet, EntropyMatchesQuadrature) {
  for (auto [a, b] : {std::pair{2.0, 3.0}, {4.0, 2.5}, {6.0, 6.0}}) {
    // Simpson's rule for -int p ln p on (0, 1); the integrand vanishes at both ends.
    const int n = 20000;
    double s = 0.0;
    for (int k = 1; k < n; ++k) {
      const double x = static_cast<double>(k) / n;
      const double p = std::pow(x, a - 1) * std::pow(1 - x, b - 1) / beta_fn(a, b);
      s += (k % 2 ? 4.0 : 2.0) * (p > 0 ? -p * std::log(p) : 0.0);
    }
    s /= 3.0 * n;
    EXPECT_NEAR(dirichlet_entropy(Eigen::Vector2d(a, b)), s, 1e-6) << a << "," << b;
  }
}

TEST(Dirichlet, GradientsMatchFiniteDifferences) {
  const Eigen::Vector4d alpha(1.3, 0.6, 4.0, 2.2);
  const Eigen::Vector4d w(0.1, 0.2, 0.45, 0.25);
  const Eigen::VectorXd gl = dirichlet_log_density_grad(alpha, w);
  const Eigen::VectorXd gh = dirichlet_entropy_grad(alpha);
  for (int i = 0; i < 4; ++i) {
    auto bump = [&](double v) {
      Eigen::VectorXd a = alpha;
      a(i) = v;
      return a;
    };
    EXPECT_NEAR(gl(i), oracle::central_diff([&](double v) { return dirichlet_log_density(bump(v), w); }, alpha(i), 1e-6),
                1e-7);
    EXPECT_NEAR(gh(i), oracle::central_diff([&](double v) { return dirichlet_entropy(bump(v)); }, alpha(i), 1e-6), 1e-7);
  }
}

TEST(Dirichlet, SamplesLieOnSimplexWithCorrectMean) {
  Rng rng(5);
  const Eigen::Vector3d alpha(0.5, 2.0, 7.5);
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  const int n = 20000;
  for (int k = 0; k < n; ++k) {
    const Eigen::VectorXd w = sample_dirichlet(alpha, rng);
    ASSERT_TRUE(on_simplex(w));
    ASSERT_GE(w.minCoeff(), kMinActionWeight * 0.5);
    mean += w / n;
  }
  EXPECT_TRUE(mean.isApprox(alpha / 10.0, 0.02)) << mean.transpose();
}

TEST(SampleAction, MeanModeIsPolicyOutput) {
  const AgentBundle b = init_agent(6, 2, Algo::A2C, small_config(), 1);
  const Eigen::VectorXd s = Eigen::VectorXd::LinSpaced(6, -1, 1);
  const ActionSample a = sample_action(b.policy, s, ActionMode::Mean, 50.0);
  EXPECT_TRUE(a.weights.cwiseEqual(predict(b.policy, s)).all());
  EXPECT_NEAR(a.log_density, dirichlet_log_density(50.0 * a.weights, a.weights), 1e-12);
  EXPECT_THROW(sample_action(b.policy, s, ActionMode::Dirichlet, 50.0), Error);
}

TEST(PolicyGradient, UpstreamMatchesFiniteDifferences) {
  // d/dtheta [c1 log p(w | kappa softmax(f(s))) + c2 H] through the network.
  const AgentBundle b = init_agent(6, 3, Algo::A2C, small_config(), 4);
  const Eigen::VectorXd s = Eigen::VectorXd::LinSpaced(6, -0.5, 1.0);
  const Eigen::Vector3d w(0.2, 0.5, 0.3);
  const double kappa = 20.0, c1 = 0.7, c2 = -0.3;
  const auto e = detail::eval_policy(b.policy, s, w, kappa);
  const GradientBundle g = backward(b.policy, e.cache, detail::policy_upstream(e, w, kappa, c1, c2));
  const DenseNet& net = b.policy;
  for (std::size_t l = 0; l < net.layers.size(); ++l)
    for (Eigen::Index r = 0; r < net.layers[l].weight.rows(); ++r) {
      const Eigen::Index c = r % net.layers[l].weight.cols();
      const double fd = oracle::central_diff(
          [&](double v) {
            DenseNet n2 = net;
            n2.layers[l].weight(r, c) = v;
            n2.touch();
            const auto e2 = detail::eval_policy(n2, s, w, kappa);
            return c1 * e2.log_density + c2 * e2.entropy;
          },
          net.layers[l].weight(r, c), 1e-6);
      EXPECT_NEAR(g.params[l].weight(r, c), fd, 1e-6 * (1 + std::abs(fd)));
    }
}

TEST(A2C, ZeroAdvantageLeavesPolicyUnchanged) {
  AgentConfig cfg = small_config();
  cfg.entropy_coef = 0.0;
  cfg.normalize_advantage = false;
  AgentBundle b = init_agent(6, 2, Algo::A2C, cfg, 3);
  auto book = toy_book(5, Eigen::Vector2d(1.0, 1.0), 1);
  Trajectory traj;
  traj.gamma = 0.9;
  for (std::size_t t = 1; t <= 4; ++t) {
    Transition tr;
    tr.state = book->state(t);
    tr.next_state = book->state(t + 1);
    tr.action = Eigen::Vector2d(0.4, 0.6);
    tr.reward = critic_value(b, tr.state) - 0.9 * critic_value(b, tr.next_state);
    traj.steps.push_back(tr);
  }
  const auto before = flat_params(b.policy);
  const UpdateStats st = a2c_update(b, traj);
  EXPECT_NEAR(st.mean_advantage, 0.0, 1e-15);
  const auto after = flat_params(b.policy);
  for (std::size_t p = 0; p < before.size(); ++p) EXPECT_NEAR(after[p], before[p], 1e-12);
}

TEST(PPO, RatioIsOneBeforeFirstStep) {
  AgentBundle b = init_agent(6, 2, Algo::PPO, small_config(), 3);
  auto book = toy_book(20, Eigen::Vector2d(1.01, 0.99), 2);
  Rng rng(1);
  Trajectory traj;
  for (std::size_t t = 1; t < 20; ++t) {
    Transition tr;
    tr.state = book->state(t);
    tr.next_state = book->state(t + 1);
    const ActionSample a = sample_action(b.policy, tr.state, ActionMode::Dirichlet, b.config.kappa, &rng);
    tr.action = a.weights;
    tr.old_log_density = a.log_density;
    tr.reward = std::log(a.weights.dot(book->relative(t)));
    traj.steps.push_back(tr);
  }
  Rng shuf(2);
  const UpdateStats st = ppo_update(b, traj, 3, 0.2, shuf);
  EXPECT_LT(st.initial_ratio_deviation, 1e-12);
  EXPECT_GE(st.clip_fraction, 0.0);
  EXPECT_LE(st.clip_fraction, 1.0);
}

TEST(Train, ZeroStepsReturnsInitialAgent) {
  const auto book = toy_book(10, Eigen::Vector2d(1.0, 1.0), 0);
  const TrainResult r = train(PortfolioEnv(book), Algo::PPO, 0, 9, small_config());
  const AgentBundle init = init_agent(book->state_dim(), 2, Algo::PPO, small_config(), 9);
  EXPECT_TRUE(r.curve.empty());
  EXPECT_EQ(flat_params(r.bundle.policy), flat_params(init.policy));
  EXPECT_EQ(flat_params(r.bundle.value), flat_params(init.value));
}

TEST(Train, DeterministicPerSeed) {
  const auto book = toy_book(30, Eigen::Vector3d(1.01, 0.99, 1.0), 0);
  for (Algo a : {Algo::A2C, Algo::PPO}) {
    const TrainResult r1 = train(PortfolioEnv(book), a, 200, 5, small_config());
    const TrainResult r2 = train(PortfolioEnv(book), a, 200, 5, small_config());
    const TrainResult r3 = train(PortfolioEnv(book), a, 200, 6, small_config());
    EXPECT_EQ(flat_params(r1.bundle.policy), flat_params(r2.bundle.policy));
    EXPECT_EQ(r1.curve, r2.curve);
    EXPECT_NE(flat_params(r1.bundle.policy), flat_params(r3.bundle.policy));
    EXPECT_EQ(r1.curve.size(), 13u);  // ceil(200 / 16)
    EXPECT_EQ(r1.episodes, 6u);
  }
}

TEST(Train, LearnsToFavourTheWinningAsset) {
  // Asset 1 always gains 20%, the others lose 10%. Averaged over three
  // seeds, the mean policy puts well over 1/3 on asset 1 and the reward
  // curve rises.
  const auto book = toy_book(50, Eigen::Vector3d(0.9, 1.2, 0.9), 3);
  for (Algo a : {Algo::A2C, Algo::PPO}) {
    AgentConfig cfg = small_config();
    cfg.lr_policy = 1e-2;
    cfg.gamma = 0.9;
    double w1 = 0.0;
    for (std::uint64_t seed : {1, 2, 3}) {
      const TrainResult r = train(PortfolioEnv(book), a, 6000, seed, cfg);
      for (const auto& s : book->states) w1 += predict(r.bundle.policy, s)(1) / (3.0 * static_cast<double>(book->states.size()));
      const std::size_t q = r.curve.size() / 10;
      double first = 0, last = 0;
      for (std::size_t j = 0; j < q; ++j) {
        first += r.curve[j];
        last += r.curve[r.curve.size() - 1 - j];
      }
      EXPECT_GT(last, first) << to_string(a) << " seed " << seed;
    }
    EXPECT_GT(w1, 0.6) << to_string(a);
  }
}

TEST(Checkpoint, AgentRoundTrip) {
  const auto book = toy_book(20, Eigen::Vector2d(1.01, 0.99), 0);
  const TrainResult r = train(PortfolioEnv(book), Algo::A2C, 64, 2, small_config());
  const AgentBundle back = agent_from_json(nlohmann::json::parse(agent_to_json(r.bundle).dump()));
  EXPECT_EQ(back.algo, Algo::A2C);
  EXPECT_EQ(back.seed, 2u);
  EXPECT_EQ(flat_params(back.policy), flat_params(r.bundle.policy));
  EXPECT_EQ(flat_params(back.value), flat_params(r.bundle.value));
  EXPECT_EQ(back.config.hidden, std::vector<int>{8});
  nlohmann::json j = agent_to_json(r.bundle);
  j["value"] = net_to_json(init_net({6, 2}, {Activation::Identity}, 0));
  EXPECT_THROW(agent_from_json(j), Error);
}

TEST(AgentConfig, Validation) {
  AgentConfig c;
  c.gamma = 0.0;
  EXPECT_THROW(validate(c), Error);
  c = {};
  c.clip_eps = 1.0;
  EXPECT_THROW(validate(c), Error);
  c = {};
  c.kappa = 0.0;
  EXPECT_THROW(validate(c), Error);
  EXPECT_THROW(agent_config_from_json({{"hidden_activation", "softmax"}}), Error);
  EXPECT_NO_THROW(agent_config_from_json(nlohmann::json::object()));
}
