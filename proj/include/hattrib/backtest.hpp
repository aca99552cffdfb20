#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hattrib/drl_agents.hpp"
#include "hattrib/error.hpp"
#include "hattrib/features.hpp"
#include "hattrib/market_data.hpp"
#include "hattrib/mean_variance.hpp"
#include "hattrib/ml_baselines.hpp"

namespace hattrib {

/// What a strategy may look at when deciding w(t).
struct MarketView {
  const PricePanel* panel = nullptr;
  const FeatureTensor* scaled = nullptr;
  std::size_t cov_window = 60;
  double lambda = 0.5;
};

enum class StrategyKind { Drl, Ml, EqualWeight, Hindsight };

class Strategy {
 public:
  virtual ~Strategy() = default;
  virtual std::string name() const = 0;
  virtual StrategyKind kind() const = 0;
  // True only for the hindsight reference, which reads y(t) before trading.
  virtual bool uses_lookahead() const { return false; }
  virtual PortfolioWeights weights(const MarketView& view, std::size_t t) const = 0;
};

class EqualWeightStrategy final : public Strategy {
 public:
  std::string name() const override { return "equal_weight"; }
  StrategyKind kind() const override { return StrategyKind::EqualWeight; }
  PortfolioWeights weights(const MarketView& view, std::size_t t) const override {
    const auto n = static_cast<Eigen::Index>(view.panel->num_assets());
    return {Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n)), t};
  }
};

/// Mean-variance optimum under the realized y(t) and realized covariance.
/// Uses future information by design; reference only.
class HindsightStrategy final : public Strategy {
 public:
  std::string name() const override { return "hindsight"; }
  StrategyKind kind() const override { return StrategyKind::Hindsight; }
  bool uses_lookahead() const override { return true; }
  PortfolioWeights weights(const MarketView& view, std::size_t t) const override {
    return hindsight_weights(price_relatives(*view.panel, t), realized_covariance(*view.panel, t, view.cov_window),
                             view.lambda)
        .weights;
  }
};

class MLStrategy final : public Strategy {
 public:
  explicit MLStrategy(std::shared_ptr<const RegressorModel> model) : model_(std::move(model)) {}
  std::string name() const override { return to_string(model_->kind); }
  StrategyKind kind() const override { return StrategyKind::Ml; }
  const RegressorModel& model() const { return *model_; }
  PortfolioWeights weights(const MarketView& view, std::size_t t) const override {
    return ml_strategy_weights(*model_, features_known_at(*view.scaled, t),
                               sample_covariance(*view.panel, t, view.cov_window), view.lambda);
  }

 private:
  std::shared_ptr<const RegressorModel> model_;
};

/// Deterministic evaluation: the policy's softmax mean.
class DrlStrategy final : public Strategy {
 public:
  explicit DrlStrategy(std::shared_ptr<const AgentBundle> agent) : agent_(std::move(agent)) {}
  std::string name() const override { return to_string(agent_->algo); }
  StrategyKind kind() const override { return StrategyKind::Drl; }
  const AgentBundle& agent() const { return *agent_; }
  PortfolioWeights weights(const MarketView& view, std::size_t t) const override {
    const Eigen::VectorXd s = flatten_state(build_state(*view.panel, *view.scaled, t, view.cov_window));
    return {sample_action(agent_->policy, s, ActionMode::Mean, agent_->config.kappa).weights, t};
  }

 private:
  std::shared_ptr<const AgentBundle> agent_;
};

struct BacktestResult {
  std::string strategy;
  bool lookahead = false;
  std::vector<std::size_t> slots;
  std::vector<std::string> dates;
  std::vector<Eigen::VectorXd> weights;
  std::vector<double> log_returns;
  // v(t)/v(0); values[0] = 1 is the capital before the first traded slot.
  std::vector<double> values;
  // prod_t w(t)'y(t), accumulated independently of the log-returns.
  double gross_product = 1.0;
};

/// Walk-forward evaluation over slots first..last: r(t) = ln(w(t)'y(t)).
inline BacktestResult run(const Strategy& strategy, const MarketView& view, std::size_t first, std::size_t last) {
  require(view.panel != nullptr && view.scaled != nullptr, ErrorCode::ConfigError, "market view is incomplete");
  require(first >= 1 && first <= last && last <= view.panel->last_slot(), ErrorCode::SlotOutOfRange,
          "trade range outside the panel");
  BacktestResult r;
  r.strategy = strategy.name();
  r.lookahead = strategy.uses_lookahead();
  r.values.push_back(1.0);
  double log_sum = 0.0;
  for (std::size_t t = first; t <= last; ++t) {
    PortfolioWeights w;
    try {
      w = strategy.weights(view, t);
    } catch (const Error& e) {
      throw Error(e.code(), strategy.name() + " failed at slot " + std::to_string(t) + " (" +
                                view.panel->dates[t] + "): " + e.what());
    }
    require(on_simplex(w.values, 1e-8), ErrorCode::NotOnSimplex,
            strategy.name() + " produced off-simplex weights at slot " + std::to_string(t));
    const double gross = w.values.dot(price_relatives(*view.panel, t).values);
    const double lr = std::log(gross);
    log_sum += lr;
    r.gross_product *= gross;
    r.slots.push_back(t);
    r.dates.push_back(view.panel->dates[t]);
    r.weights.push_back(std::move(w.values));
    r.log_returns.push_back(lr);
    r.values.push_back(std::exp(log_sum));
  }
  return r;
}

/// min over t of v(t) / max_{s<=t} v(s) - 1
inline double max_drawdown(const std::vector<double>& values) {
  double peak = -std::numeric_limits<double>::infinity();
  double mdd = 0.0;
  for (double v : values) {
    peak = std::max(peak, v);
    mdd = std::min(mdd, v / peak - 1.0);
  }
  return mdd;
}

struct Metrics {
  std::size_t slots = 0;
  double cumulative_return = 0.0;
  double annual_return = 0.0;
  double annual_volatility = 0.0;
  // nullopt: zero volatility.
  std::optional<double> sharpe;
  // +infinity when the drawdown is zero.
  double calmar = 0.0;
  double max_drawdown = 0.0;
};

/// Annualized metrics with simple per-slot returns rho(t) = exp(r(t)) - 1.
inline Metrics metrics(const std::vector<double>& log_returns, double periods_per_year = 252.0,
                       double risk_free = 0.0) {
  const std::size_t n = log_returns.size();
  require(n >= 2, ErrorCode::TooFewSamples, "metrics need at least 2 slots");
  std::vector<double> values{1.0};
  double log_sum = 0.0;
  double mean = 0.0;
  std::vector<double> rho(n);
  for (std::size_t t = 0; t < n; ++t) {
    log_sum += log_returns[t];
    values.push_back(std::exp(log_sum));
    rho[t] = std::expm1(log_returns[t]);
    mean += rho[t];
  }
  mean /= static_cast<double>(n);
  double ss = 0.0;
  double scale = 0.0;
  for (double x : rho) {
    ss += (x - mean) * (x - mean);
    scale = std::max(scale, std::abs(x));
  }
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));

  Metrics m;
  m.slots = n;
  m.cumulative_return = values.back() - 1.0;
  m.annual_return = std::pow(values.back(), periods_per_year / static_cast<double>(n)) - 1.0;
  // Spread below rounding noise of the returns counts as zero volatility.
  const bool zero_vol = sd <= 1e-12 * std::max(scale, 1e-300);
  m.annual_volatility = zero_vol ? 0.0 : sd * std::sqrt(periods_per_year);
  if (!zero_vol) m.sharpe = (mean * periods_per_year - risk_free) / m.annual_volatility;
  m.max_drawdown = max_drawdown(values);
  m.calmar = m.max_drawdown < 0.0 ? m.annual_return / std::abs(m.max_drawdown)
                                  : std::numeric_limits<double>::infinity();
  return m;
}

inline Metrics metrics(const BacktestResult& r, double periods_per_year = 252.0, double risk_free = 0.0) {
  return metrics(r.log_returns, periods_per_year, risk_free);
}

namespace detail {
// JSON has no infinity; non-finite metrics become strings.
inline nlohmann::json finite_or_string(double v) {
  if (std::isfinite(v)) return v;
  return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
}
}  // namespace detail

inline nlohmann::json to_json(const Metrics& m) {
  return {{"slots", m.slots},
          {"annual_return", m.annual_return},
          {"cumulative_return", m.cumulative_return},
          {"annual_volatility", m.annual_volatility},
          {"sharpe", m.sharpe ? nlohmann::json(*m.sharpe) : nlohmann::json(nullptr)},
          {"calmar", detail::finite_or_string(m.calmar)},
          {"max_drawdown", m.max_drawdown}};
}

/// `date,return,value` with return = r(t) and value = v(t)/v(0).
inline std::string backtest_to_csv(const BacktestResult& r) {
  std::string out = "date,return,value\n";
  for (std::size_t j = 0; j < r.slots.size(); ++j)
    out += r.dates[j] + ',' + csv::format_double(r.log_returns[j]) + ',' + csv::format_double(r.values[j + 1]) + '\n';
  return out;
}

}  // namespace hattrib
