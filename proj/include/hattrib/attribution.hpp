#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hattrib/drl_agents.hpp"
#include "hattrib/error.hpp"
#include "hattrib/hindsight_reference.hpp"
#include "hattrib/neural_core.hpp"

namespace hattrib {

/// Layout of a flattened N x (N+K) state: feature k of asset i sits at
/// i * (N+K) + k.
struct StateLayout {
  Eigen::Index num_assets = 0;
  Eigen::Index num_features = 0;

  Eigen::Index width() const { return num_assets + num_features; }
  Eigen::Index size() const { return num_assets * width(); }
  Eigen::Index index(Eigen::Index asset, Eigen::Index feature) const { return asset * width() + feature; }
};

/// Copy of x with every feature entry set to zero.
inline Eigen::VectorXd zero_features(const Eigen::VectorXd& x, const StateLayout& layout) {
  Eigen::VectorXd out = x;
  for (Eigen::Index i = 0; i < layout.num_assets; ++i)
    for (Eigen::Index k = 0; k < layout.num_features; ++k) out(layout.index(i, k)) = 0.0;
  return out;
}

struct IGConfig {
  int path_steps = 64;
};

/// Scalar function with input gradient: returns F(x) and writes dF/dx.
/// Networks with one output are adapted by net_scalar_fn().
inline auto net_scalar_fn(const DenseNet& net) {
  require(net.output_dim() == 1, ErrorCode::DimensionMismatch, "attribution target must have a scalar output");
  return [&net](const Eigen::VectorXd& x, Eigen::VectorXd& grad) {
    const ForwardCache c = forward(net, x);
    grad = backward(net, c, Eigen::VectorXd::Ones(1)).input;
    return c.output()(0);
  };
}

namespace detail {

// Midpoint-rule path average of the gradient from `baseline` to `x`.
template <class Fn>
Eigen::VectorXd path_mean_gradient(Fn&& fn, const Eigen::VectorXd& x, const Eigen::VectorXd& baseline, int m) {
  require(m >= 1, ErrorCode::ConfigError, "path_steps must be >= 1");
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(x.size());
  Eigen::VectorXd grad;
  const Eigen::VectorXd delta = x - baseline;
  for (int j = 1; j <= m; ++j) {
    const double a = (static_cast<double>(j) - 0.5) / static_cast<double>(m);
    fn(Eigen::VectorXd(baseline + a * delta), grad);
    require(grad.size() == x.size(), ErrorCode::DimensionMismatch, "gradient has wrong length");
    acc += grad;
  }
  acc /= static_cast<double>(m);
  require(acc.allFinite(), ErrorCode::NonFiniteGradient, "non-finite gradient along the integration path");
  return acc;
}

}  // namespace detail

/// IG of feature k for every asset. The baseline zeroes feature k's column
/// and keeps every other state entry at its value in x.
template <class Fn>
Eigen::VectorXd integrated_gradients(Fn&& fn, const Eigen::VectorXd& x, const StateLayout& layout, Eigen::Index k,
                                     const IGConfig& cfg = {}) {
  require(x.size() == layout.size(), ErrorCode::DimensionMismatch, "state does not match layout");
  require(k >= 0 && k < layout.num_features, ErrorCode::DimensionMismatch, "feature index out of range");
  Eigen::VectorXd baseline = x;
  for (Eigen::Index i = 0; i < layout.num_assets; ++i) baseline(layout.index(i, k)) = 0.0;
  const Eigen::VectorXd g = detail::path_mean_gradient(fn, x, baseline, cfg.path_steps);
  Eigen::VectorXd ig(layout.num_assets);
  for (Eigen::Index i = 0; i < layout.num_assets; ++i) ig(i) = x(layout.index(i, k)) * g(layout.index(i, k));
  return ig;
}

/// IG along one path whose baseline zeroes every feature column at once;
/// N x K. Its entries sum to F(x) - F(baseline) up to quadrature error.
template <class Fn>
Eigen::MatrixXd integrated_gradients_joint(Fn&& fn, const Eigen::VectorXd& x, const StateLayout& layout,
                                           const IGConfig& cfg = {}) {
  require(x.size() == layout.size(), ErrorCode::DimensionMismatch, "state does not match layout");
  const Eigen::VectorXd baseline = zero_features(x, layout);
  const Eigen::VectorXd g = detail::path_mean_gradient(fn, x, baseline, cfg.path_steps);
  Eigen::MatrixXd ig(layout.num_assets, layout.num_features);
  for (Eigen::Index i = 0; i < layout.num_assets; ++i)
    for (Eigen::Index k = 0; k < layout.num_features; ++k)
      ig(i, k) = x(layout.index(i, k)) * g(layout.index(i, k));
  return ig;
}

/// M(t)_k = sum_i IG(f^k(t))_i with the critic V(s) as attribution target.
inline Eigen::VectorXd drl_feature_weights(const AgentBundle& agent, const Eigen::VectorXd& state,
                                           const StateLayout& layout, const IGConfig& cfg = {}) {
  auto fn = net_scalar_fn(agent.value);
  Eigen::VectorXd m(layout.num_features);
  for (Eigen::Index k = 0; k < layout.num_features; ++k) m(k) = integrated_gradients(fn, state, layout, k, cfg).sum();
  return m;
}

/// Pearson correlation across components; nullopt when either vector has
/// (numerically) zero variance.
inline std::optional<double> correlate(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  require(a.size() == b.size(), ErrorCode::DimensionMismatch, "correlated vectors differ in length");
  require(a.size() >= 2, ErrorCode::DimensionMismatch, "correlation needs at least 2 components");
  const Eigen::ArrayXd da = a.array() - a.mean();
  const Eigen::ArrayXd db = b.array() - b.mean();
  const double saa = da.square().sum();
  const double sbb = db.square().sum();
  const double tiny_a = 1e-28 * std::max(1.0, a.squaredNorm());
  const double tiny_b = 1e-28 * std::max(1.0, b.squaredNorm());
  if (!(saa > tiny_a) || !(sbb > tiny_b)) return std::nullopt;
  const double r = (da * db).sum() / std::sqrt(saa * sbb);
  return std::clamp(r, -1.0, 1.0);
}

enum class PowerMode { Single, Multi };

struct CorrelationSeries {
  PowerMode mode = PowerMode::Single;
  std::size_t window = 1;
  std::vector<std::size_t> slots;
  std::vector<std::optional<double>> rho;
};

struct PredictionPower {
  CorrelationSeries series;
  // Mean over defined correlations; nullopt when none is defined.
  std::optional<double> mean;
  std::size_t defined = 0;
  std::size_t undefined = 0;
};

/// Single mode correlates series(t) with beta(t); multi mode with the
/// W-slot forward average beta^W(t). Only slots present in both are used.
inline PredictionPower prediction_power(const FeatureWeightSeries& series, const FeatureWeightSeries& reference,
                                        PowerMode mode, std::size_t window = 20) {
  const FeatureWeightSeries ref = mode == PowerMode::Multi ? smooth_reference(reference, window) : reference;
  PredictionPower out;
  out.series.mode = mode;
  out.series.window = mode == PowerMode::Multi ? window : 1;
  double sum = 0.0;
  std::size_t j = 0;
  for (std::size_t s = 0; s < series.size(); ++s) {
    while (j < ref.size() && ref.slots[j] < series.slots[s]) ++j;
    if (j == ref.size()) break;
    if (ref.slots[j] != series.slots[s]) continue;
    const auto r = correlate(series.weights[s], ref.weights[j]);
    out.series.slots.push_back(series.slots[s]);
    out.series.rho.push_back(r);
    if (r) {
      sum += *r;
      ++out.defined;
    } else {
      ++out.undefined;
    }
  }
  require(!out.series.slots.empty(), ErrorCode::NoOverlap, "feature weight series and reference share no slots");
  if (out.defined > 0) out.mean = sum / static_cast<double>(out.defined);
  return out;
}

inline std::vector<double> defined_values(const std::vector<std::optional<double>>& xs) {
  std::vector<double> out;
  for (const auto& x : xs)
    if (x) out.push_back(*x);
  return out;
}

struct ZTestResult {
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;
  double z = 0.0;
  std::string stars;
};

inline constexpr double kZ10 = 1.2816;
inline constexpr double kZ5 = 1.6449;

/// z = mean / (std / sqrt(n)); one-sided stars: "**" at 10%, "***" at 5%.
inline ZTestResult upper_tail_z(std::size_t n, double mean, double std) {
  require(n >= 2, ErrorCode::TooFewSamples, "z test needs at least 2 samples");
  require(std > 0.0, ErrorCode::ZeroVariance, "z test on zero-variance sample");
  ZTestResult r{n, mean, std, mean / (std / std::sqrt(static_cast<double>(n))), ""};
  if (r.z > kZ5)
    r.stars = "***";
  else if (r.z > kZ10)
    r.stars = "**";
  return r;
}

inline ZTestResult upper_tail_z(const std::vector<double>& rhos) {
  const std::size_t n = rhos.size();
  require(n >= 2, ErrorCode::TooFewSamples, "z test needs at least 2 samples");
  double mean = 0.0;
  for (double r : rhos) mean += r;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double r : rhos) ss += (r - mean) * (r - mean);
  return upper_tail_z(n, mean, std::sqrt(ss / static_cast<double>(n - 1)));
}

struct Histogram {
  std::vector<double> edges;
  std::vector<std::size_t> counts;
};

/// Uniform bins over [-1, 1]; the last bin is closed on the right.
inline Histogram histogram(const std::vector<double>& rhos, std::size_t bins) {
  require(bins >= 1, ErrorCode::ConfigError, "histogram needs at least one bin");
  Histogram h;
  h.counts.assign(bins, 0);
  for (std::size_t b = 0; b <= bins; ++b)
    h.edges.push_back(-1.0 + 2.0 * static_cast<double>(b) / static_cast<double>(bins));
  for (double r : rhos) {
    if (!(r >= -1.0 && r <= 1.0)) continue;
    auto b = static_cast<std::size_t>((r + 1.0) / 2.0 * static_cast<double>(bins));
    h.counts[std::min(b, bins - 1)]++;
  }
  return h;
}

}  // namespace hattrib
