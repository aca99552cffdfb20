#pragma once

#include <Eigen/Dense>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "hattrib/error.hpp"
#include "hattrib/features.hpp"
#include "hattrib/market_data.hpp"
#include "hattrib/mean_variance.hpp"
#include "hattrib/neural_core.hpp"
#include "hattrib/random.hpp"

namespace hattrib {

/// Precomputed flattened states s(t) and relatives y(t) for slots
/// [t_start, t_end]. Shared read-only between environments.
struct StateBook {
  std::size_t t_start = 0;
  std::size_t t_end = 0;
  Eigen::Index num_assets = 0;
  Eigen::Index num_features = 0;
  std::vector<Eigen::VectorXd> states;
  std::vector<Eigen::VectorXd> relatives;

  Eigen::Index state_dim() const { return num_assets * (num_assets + num_features); }
  const Eigen::VectorXd& state(std::size_t t) const { return states.at(t - t_start); }
  const Eigen::VectorXd& relative(std::size_t t) const { return relatives.at(t - t_start); }
};

inline StateBook make_state_book(const PricePanel& panel, const FeatureTensor& scaled, std::size_t t_start,
                                 std::size_t t_end, std::size_t cov_window) {
  require(t_start >= 1 && t_start <= t_end && t_end <= panel.last_slot(), ErrorCode::SlotOutOfRange,
          "episode bounds [" + std::to_string(t_start) + ", " + std::to_string(t_end) + "] outside the panel");
  StateBook book;
  book.t_start = t_start;
  book.t_end = t_end;
  book.num_assets = static_cast<Eigen::Index>(panel.num_assets());
  book.num_features = static_cast<Eigen::Index>(scaled.num_features());
  for (std::size_t t = t_start; t <= t_end; ++t) {
    book.states.push_back(flatten_state(build_state(panel, scaled, t, cov_window)));
    book.relatives.push_back(price_relatives(panel, t).values);
  }
  return book;
}

struct StepResult {
  double reward = 0.0;
  bool done = false;
};

/// One pass over [t_start, t_end]; the state at cursor t is what is known at
/// the beginning of slot t.
class PortfolioEnv {
 public:
  explicit PortfolioEnv(std::shared_ptr<const StateBook> book) : book_(std::move(book)) {
    require(book_ != nullptr && !book_->states.empty(), ErrorCode::SlotOutOfRange, "empty environment");
    cursor_ = book_->t_start;
  }

  void reset() { cursor_ = book_->t_start; }
  bool finished() const { return cursor_ > book_->t_end; }
  std::size_t cursor() const { return cursor_; }
  const StateBook& book() const { return *book_; }

  const Eigen::VectorXd& state() const {
    require(!finished(), ErrorCode::EpisodeFinished, "episode already finished");
    return book_->state(cursor_);
  }

  /// reward = ln(w' y(t)); advances the cursor.
  StepResult step(const Eigen::VectorXd& w) {
    require(!finished(), ErrorCode::EpisodeFinished, "step after the end of the episode");
    require(w.size() == book_->num_assets && on_simplex(w), ErrorCode::NotOnSimplex, "action is not on the simplex");
    StepResult r;
    r.reward = std::log(w.dot(book_->relative(cursor_)));
    ++cursor_;
    r.done = finished();
    return r;
  }

 private:
  std::shared_ptr<const StateBook> book_;
  std::size_t cursor_ = 0;
};

/// A = r + gamma * v_next - v_now; pass v_next = 0 on terminal transitions.
inline double advantage(double reward, double gamma, double v_next, double v_now) {
  return reward + gamma * v_next - v_now;
}

// ---- Dirichlet policy head ----

inline double dirichlet_log_density(const Eigen::VectorXd& alpha, const Eigen::VectorXd& w) {
  double lp = std::lgamma(alpha.sum());
  for (Eigen::Index i = 0; i < alpha.size(); ++i) lp += (alpha(i) - 1.0) * std::log(w(i)) - std::lgamma(alpha(i));
  return lp;
}

/// d log p / d alpha_i = psi(alpha_0) - psi(alpha_i) + ln w_i
inline Eigen::VectorXd dirichlet_log_density_grad(const Eigen::VectorXd& alpha, const Eigen::VectorXd& w) {
  const double psi0 = boost::math::digamma(alpha.sum());
  Eigen::VectorXd g(alpha.size());
  for (Eigen::Index i = 0; i < alpha.size(); ++i) g(i) = psi0 - boost::math::digamma(alpha(i)) + std::log(w(i));
  return g;
}

inline double dirichlet_entropy(const Eigen::VectorXd& alpha) {
  const double a0 = alpha.sum();
  const auto k = static_cast<double>(alpha.size());
  double h = -std::lgamma(a0) + (a0 - k) * boost::math::digamma(a0);
  for (Eigen::Index i = 0; i < alpha.size(); ++i)
    h += std::lgamma(alpha(i)) - (alpha(i) - 1.0) * boost::math::digamma(alpha(i));
  return h;
}

/// dH / d alpha_i = (alpha_0 - K) psi'(alpha_0) - (alpha_i - 1) psi'(alpha_i)
inline Eigen::VectorXd dirichlet_entropy_grad(const Eigen::VectorXd& alpha) {
  const double a0 = alpha.sum();
  const double common = (a0 - static_cast<double>(alpha.size())) * boost::math::trigamma(a0);
  Eigen::VectorXd g(alpha.size());
  for (Eigen::Index i = 0; i < alpha.size(); ++i) g(i) = common - (alpha(i) - 1.0) * boost::math::trigamma(alpha(i));
  return g;
}

// Smallest weight a Dirichlet draw may carry; keeps log-densities finite.
inline constexpr double kMinActionWeight = 1e-12;

inline Eigen::VectorXd sample_dirichlet(const Eigen::VectorXd& alpha, Rng& rng) {
  Eigen::VectorXd g(alpha.size());
  for (Eigen::Index i = 0; i < alpha.size(); ++i) g(i) = rng.gamma(alpha(i));
  g /= g.sum();
  g = g.cwiseMax(kMinActionWeight);
  return g / g.sum();
}

// ---- agents ----

enum class Algo { A2C, PPO };

inline std::string to_string(Algo a) { return a == Algo::A2C ? "a2c" : "ppo"; }

inline Algo algo_from_string(const std::string& s) {
  if (s == "a2c") return Algo::A2C;
  if (s == "ppo") return Algo::PPO;
  fail(ErrorCode::ConfigError, "unknown algorithm '" + s + "'");
}

enum class ActionMode { Mean, Dirichlet };

struct AgentConfig {
  double gamma = 0.99;
  std::size_t rollout = 64;
  double entropy_coef = 0.01;
  double clip_eps = 0.2;
  int ppo_epochs = 4;
  std::size_t minibatch = 64;
  double lr_policy = 1e-3;
  double lr_value = 1e-3;
  // Dirichlet concentration: alpha = kappa * softmax(logits).
  double kappa = 100.0;
  // Standardize advantages within each update batch.
  bool normalize_advantage = true;
  std::vector<int> hidden{64, 64};
  Activation hidden_activation = Activation::Tanh;
};

inline void validate(const AgentConfig& c) {
  require(c.gamma > 0.0 && c.gamma <= 1.0, ErrorCode::ConfigError, "gamma must be in (0, 1]");
  require(c.rollout >= 1, ErrorCode::ConfigError, "rollout must be >= 1");
  require(c.entropy_coef >= 0.0, ErrorCode::ConfigError, "entropy_coef must be >= 0");
  require(c.clip_eps > 0.0 && c.clip_eps < 1.0, ErrorCode::ConfigError, "clip_eps must be in (0, 1)");
  require(c.ppo_epochs >= 1, ErrorCode::ConfigError, "ppo_epochs must be >= 1");
  require(c.minibatch >= 1, ErrorCode::ConfigError, "minibatch must be >= 1");
  require(c.lr_policy >= 0.0 && c.lr_value >= 0.0, ErrorCode::ConfigError, "learning rates must be >= 0");
  require(c.kappa > 0.0, ErrorCode::ConfigError, "kappa must be > 0");
  require(c.hidden_activation != Activation::Softmax, ErrorCode::ConfigError, "hidden layers cannot use softmax");
}

inline nlohmann::json to_json(const AgentConfig& c) {
  return {{"gamma", c.gamma},           {"rollout", c.rollout},   {"entropy_coef", c.entropy_coef},
          {"clip_eps", c.clip_eps},     {"ppo_epochs", c.ppo_epochs}, {"minibatch", c.minibatch},
          {"lr_policy", c.lr_policy},   {"lr_value", c.lr_value}, {"kappa", c.kappa},
          {"normalize_advantage", c.normalize_advantage},
          {"hidden", c.hidden},         {"hidden_activation", to_string(c.hidden_activation)}};
}

inline AgentConfig agent_config_from_json(const nlohmann::json& j) {
  AgentConfig c;
  c.gamma = j.value("gamma", c.gamma);
  c.rollout = j.value("rollout", c.rollout);
  c.entropy_coef = j.value("entropy_coef", c.entropy_coef);
  c.clip_eps = j.value("clip_eps", c.clip_eps);
  c.ppo_epochs = j.value("ppo_epochs", c.ppo_epochs);
  c.minibatch = j.value("minibatch", c.minibatch);
  c.lr_policy = j.value("lr_policy", c.lr_policy);
  c.lr_value = j.value("lr_value", c.lr_value);
  c.kappa = j.value("kappa", c.kappa);
  c.normalize_advantage = j.value("normalize_advantage", c.normalize_advantage);
  c.hidden = j.value("hidden", c.hidden);
  c.hidden_activation = activation_from_string(j.value("hidden_activation", std::string("tanh")));
  validate(c);
  return c;
}

struct AgentBundle {
  Algo algo = Algo::PPO;
  AgentConfig config;
  std::uint64_t seed = 0;
  DenseNet policy;  // softmax head over N assets
  DenseNet value;   // scalar critic V(s)
  AdamState policy_opt;
  AdamState value_opt;
};

inline AgentBundle init_agent(Eigen::Index state_dim, Eigen::Index num_assets, Algo algo, const AgentConfig& cfg,
                              std::uint64_t seed) {
  validate(cfg);
  std::vector<int> dims{static_cast<int>(state_dim)};
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  std::vector<Activation> acts(cfg.hidden.size(), cfg.hidden_activation);

  AgentBundle b;
  b.algo = algo;
  b.config = cfg;
  b.seed = seed;
  auto pdims = dims;
  pdims.push_back(static_cast<int>(num_assets));
  auto pacts = acts;
  pacts.push_back(Activation::Softmax);
  b.policy = init_net(pdims, pacts, derive_seed(seed, 2));
  auto vdims = dims;
  vdims.push_back(1);
  auto vacts = acts;
  vacts.push_back(Activation::Identity);
  b.value = init_net(vdims, vacts, derive_seed(seed, 3));
  b.policy_opt = AdamState::for_net(b.policy);
  b.value_opt = AdamState::for_net(b.value);
  return b;
}

inline double critic_value(const AgentBundle& b, const Eigen::VectorXd& state) { return predict(b.value, state)(0); }

struct ActionSample {
  Eigen::VectorXd weights;
  double log_density = 0.0;
};

/// Mean mode returns the softmax output; Dirichlet mode samples around it
/// with concentration kappa. The log-density is the Dirichlet density at the
/// returned point in both modes.
inline ActionSample sample_action(const DenseNet& policy, const Eigen::VectorXd& state, ActionMode mode, double kappa,
                                  Rng* rng = nullptr) {
  const Eigen::VectorXd mean = predict(policy, state);
  const Eigen::VectorXd alpha = kappa * mean;
  ActionSample a;
  if (mode == ActionMode::Mean) {
    a.weights = mean;
  } else {
    require(rng != nullptr, ErrorCode::ConfigError, "dirichlet sampling needs a random source");
    a.weights = sample_dirichlet(alpha, *rng);
  }
  a.log_density = dirichlet_log_density(alpha, a.weights.cwiseMax(kMinActionWeight));
  return a;
}

struct Transition {
  std::size_t slot = 0;
  Eigen::VectorXd state;
  Eigen::VectorXd action;
  double reward = 0.0;
  Eigen::VectorXd next_state;  // empty when done
  bool done = false;
  double old_log_density = 0.0;
};

struct Trajectory {
  std::vector<Transition> steps;
  double gamma = 0.99;
};

struct UpdateStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double mean_advantage = 0.0;
  // max |R - 1| before any PPO step (0 for A2C).
  double initial_ratio_deviation = 0.0;
  double clip_fraction = 0.0;
};

/// PPO surrogate term min(R A, clip(R, 1-eps, 1+eps) A).
inline double ppo_clip_objective(double ratio, double adv, double eps) {
  return std::min(ratio * adv, std::clamp(ratio, 1.0 - eps, 1.0 + eps) * adv);
}

/// d/dR of ppo_clip_objective: A where the unclipped branch is active, else 0.
inline double ppo_clip_objective_dratio(double ratio, double adv, double eps) {
  const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
  return ratio * adv <= clipped * adv ? adv : 0.0;
}

namespace detail {

struct PolicyEval {
  ForwardCache cache;
  Eigen::VectorXd alpha;
  double log_density = 0.0;
  double entropy = 0.0;
};

inline PolicyEval eval_policy(const DenseNet& policy, const Eigen::VectorXd& state, const Eigen::VectorXd& action,
                              double kappa) {
  PolicyEval e;
  e.cache = forward(policy, state);
  e.alpha = kappa * e.cache.output();
  e.log_density = dirichlet_log_density(e.alpha, action);
  e.entropy = dirichlet_entropy(e.alpha);
  return e;
}

// Gradient (w.r.t. policy softmax output) of c_lp * log p + c_h * H.
inline Eigen::VectorXd policy_upstream(const PolicyEval& e, const Eigen::VectorXd& action, double kappa, double c_lp,
                                       double c_h) {
  Eigen::VectorXd g = Eigen::VectorXd::Zero(e.alpha.size());
  if (c_lp != 0.0) g += c_lp * dirichlet_log_density_grad(e.alpha, action);
  if (c_h != 0.0) g += c_h * dirichlet_entropy_grad(e.alpha);
  return kappa * g;
}

inline void check_finite(double v, const GradientBundle& g, const char* what) {
  if (!std::isfinite(v) || !g.all_finite()) fail(ErrorCode::NaNLoss, std::string(what) + " became non-finite");
}

// Critic regression toward r + gamma V(s') over the given transitions; one Adam step.
inline double value_step(AgentBundle& b, const Trajectory& traj, const std::vector<std::size_t>& idx,
                         const std::vector<double>& targets) {
  GradientBundle grad = GradientBundle::zeros_like(b.value);
  double loss = 0.0;
  const double n = static_cast<double>(idx.size());
  for (std::size_t j : idx) {
    const ForwardCache c = forward(b.value, traj.steps[j].state);
    const double err = c.output()(0) - targets[j];
    loss += 0.5 * err * err / n;
    grad += backward(b.value, c, Eigen::VectorXd::Constant(1, err / n));
  }
  check_finite(loss, grad, "value loss");
  adam_step(b.value, grad, b.value_opt, b.config.lr_value);
  return loss;
}

inline void advantages_and_targets(const AgentBundle& b, const Trajectory& traj, std::vector<double>& adv,
                                   std::vector<double>& targets) {
  adv.resize(traj.steps.size());
  targets.resize(traj.steps.size());
  for (std::size_t j = 0; j < traj.steps.size(); ++j) {
    const auto& tr = traj.steps[j];
    const double v_now = critic_value(b, tr.state);
    const double v_next = tr.done ? 0.0 : critic_value(b, tr.next_state);
    targets[j] = tr.reward + traj.gamma * v_next;
    adv[j] = advantage(tr.reward, traj.gamma, v_next, v_now);
  }
  if (b.config.normalize_advantage && adv.size() > 1) {
    const double n = static_cast<double>(adv.size());
    const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / n;
    double ss = 0.0;
    for (double a : adv) ss += (a - mean) * (a - mean);
    const double sd = std::sqrt(ss / n);
    if (sd > 0.0)
      for (double& a : adv) a = (a - mean) / (sd + 1e-12);
  }
}

}  // namespace detail

/// One A2C step on each network: maximize mean(log pi(w|s) A) + c * mean(H)
/// with A held constant, and regress V toward r + gamma V(s').
inline UpdateStats a2c_update(AgentBundle& b, const Trajectory& traj) {
  require(!traj.steps.empty(), ErrorCode::ConfigError, "empty trajectory");
  std::vector<double> adv;
  std::vector<double> targets;
  detail::advantages_and_targets(b, traj, adv, targets);

  UpdateStats st;
  const double n = static_cast<double>(traj.steps.size());
  GradientBundle pg = GradientBundle::zeros_like(b.policy);
  for (std::size_t j = 0; j < traj.steps.size(); ++j) {
    const auto& tr = traj.steps[j];
    const auto e = detail::eval_policy(b.policy, tr.state, tr.action, b.config.kappa);
    st.policy_loss -= (e.log_density * adv[j] + b.config.entropy_coef * e.entropy) / n;
    st.entropy += e.entropy / n;
    st.mean_advantage += adv[j] / n;
    // descent on the loss: upstream = -d(objective)/d(output)
    const Eigen::VectorXd up =
        detail::policy_upstream(e, tr.action, b.config.kappa, -adv[j] / n, -b.config.entropy_coef / n);
    pg += backward(b.policy, e.cache, up);
  }
  detail::check_finite(st.policy_loss, pg, "policy loss");
  adam_step(b.policy, pg, b.policy_opt, b.config.lr_policy);

  std::vector<std::size_t> all(traj.steps.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  st.value_loss = detail::value_step(b, traj, all, targets);
  return st;
}

/// Clipped-surrogate PPO over `epochs` passes of shuffled minibatches.
/// Advantages and old log-densities are frozen at entry.
inline UpdateStats ppo_update(AgentBundle& b, const Trajectory& traj, int epochs, double clip_eps, Rng& rng) {
  require(!traj.steps.empty(), ErrorCode::ConfigError, "empty trajectory");
  require(epochs >= 1, ErrorCode::ConfigError, "ppo epochs must be >= 1");
  std::vector<double> adv;
  std::vector<double> targets;
  detail::advantages_and_targets(b, traj, adv, targets);

  UpdateStats st;
  const auto n_all = traj.steps.size();
  for (std::size_t j = 0; j < n_all; ++j) {
    const auto& tr = traj.steps[j];
    const auto e = detail::eval_policy(b.policy, tr.state, tr.action, b.config.kappa);
    st.initial_ratio_deviation =
        std::max(st.initial_ratio_deviation, std::abs(std::exp(e.log_density - tr.old_log_density) - 1.0));
    st.mean_advantage += adv[j] / static_cast<double>(n_all);
  }

  std::vector<std::size_t> order(n_all);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t mb = std::min(b.config.minibatch, n_all);
  std::size_t clipped = 0;
  std::size_t seen = 0;
  for (int ep = 0; ep < epochs; ++ep) {
    for (std::size_t j = n_all; j > 1; --j) std::swap(order[j - 1], order[rng.index(j)]);
    for (std::size_t start = 0; start < n_all; start += mb) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(start + mb, n_all)));
      const double n = static_cast<double>(idx.size());
      GradientBundle pg = GradientBundle::zeros_like(b.policy);
      double loss = 0.0;
      double ent = 0.0;
      for (std::size_t j : idx) {
        const auto& tr = traj.steps[j];
        const auto e = detail::eval_policy(b.policy, tr.state, tr.action, b.config.kappa);
        const double ratio = std::exp(e.log_density - tr.old_log_density);
        loss -= (ppo_clip_objective(ratio, adv[j], clip_eps) + b.config.entropy_coef * e.entropy) / n;
        ent += e.entropy / n;
        const double dr = ppo_clip_objective_dratio(ratio, adv[j], clip_eps);
        if (dr == 0.0) ++clipped;
        ++seen;
        // d ratio / d log p = ratio
        const Eigen::VectorXd up =
            detail::policy_upstream(e, tr.action, b.config.kappa, -dr * ratio / n, -b.config.entropy_coef / n);
        pg += backward(b.policy, e.cache, up);
      }
      detail::check_finite(loss, pg, "policy loss");
      adam_step(b.policy, pg, b.policy_opt, b.config.lr_policy);
      st.policy_loss = loss;
      st.entropy = ent;
      st.value_loss = detail::value_step(b, traj, idx, targets);
    }
  }
  st.clip_fraction = seen > 0 ? static_cast<double>(clipped) / static_cast<double>(seen) : 0.0;
  return st;
}

struct TrainResult {
  AgentBundle bundle;
  // Mean reward per rollout.
  std::vector<double> curve;
  std::size_t episodes = 0;
};

/// Collects rollouts of config.rollout transitions with Dirichlet actions and
/// updates after each. Deterministic for a given seed.
inline TrainResult train(PortfolioEnv env, Algo algo, std::size_t steps, std::uint64_t seed,
                         const AgentConfig& cfg = {}) {
  TrainResult out;
  out.bundle = init_agent(env.book().state_dim(), env.book().num_assets, algo, cfg, seed);
  AgentBundle& b = out.bundle;
  Rng sampler(derive_seed(seed, 1));
  Rng shuffler(derive_seed(seed, 4));
  env.reset();

  std::size_t done_steps = 0;
  while (done_steps < steps) {
    Trajectory traj;
    traj.gamma = cfg.gamma;
    const std::size_t len = std::min(cfg.rollout, steps - done_steps);
    double reward_sum = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      Transition tr;
      tr.slot = env.cursor();
      tr.state = env.state();
      const ActionSample a = sample_action(b.policy, tr.state, ActionMode::Dirichlet, cfg.kappa, &sampler);
      tr.action = a.weights;
      tr.old_log_density = a.log_density;
      const StepResult r = env.step(a.weights);
      tr.reward = r.reward;
      tr.done = r.done;
      if (!r.done) tr.next_state = env.state();
      reward_sum += r.reward;
      traj.steps.push_back(std::move(tr));
      if (r.done) {
        ++out.episodes;
        env.reset();
      }
    }
    done_steps += len;
    if (algo == Algo::A2C)
      a2c_update(b, traj);
    else
      ppo_update(b, traj, cfg.ppo_epochs, cfg.clip_eps, shuffler);
    out.curve.push_back(reward_sum / static_cast<double>(len));
  }
  return out;
}

// ---- checkpoints ----

inline nlohmann::json agent_to_json(const AgentBundle& b) {
  return {{"format", "hattrib.agent"},
          {"version", 1},
          {"algo", to_string(b.algo)},
          {"seed", b.seed},
          {"config", to_json(b.config)},
          {"policy", net_to_json(b.policy)},
          {"value", net_to_json(b.value)}};
}

inline AgentBundle agent_from_json(const nlohmann::json& j) {
  require(j.value("format", "") == "hattrib.agent", ErrorCode::ArtifactMismatch, "not an agent checkpoint");
  AgentBundle b;
  b.algo = algo_from_string(j.at("algo").get<std::string>());
  b.seed = j.at("seed").get<std::uint64_t>();
  b.config = agent_config_from_json(j.at("config"));
  b.policy = net_from_json(j.at("policy"));
  b.value = net_from_json(j.at("value"));
  require(b.policy.layers.back().activation == Activation::Softmax && b.value.output_dim() == 1 &&
              b.policy.input_dim() == b.value.input_dim(),
          ErrorCode::ArtifactMismatch, "agent networks do not fit together");
  b.policy_opt = AdamState::for_net(b.policy);
  b.value_opt = AdamState::for_net(b.value);
  return b;
}

}  // namespace hattrib
