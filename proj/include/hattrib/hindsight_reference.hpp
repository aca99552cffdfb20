#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <string>
#include <vector>

#include "hattrib/error.hpp"
#include "hattrib/features.hpp"
#include "hattrib/market_data.hpp"
#include "hattrib/mean_variance.hpp"

namespace hattrib {

/// q(t) = w(t) (elementwise) y(t).
inline Eigen::VectorXd value_relatives(const Eigen::VectorXd& w, const Eigen::VectorXd& y) {
  require(w.size() == y.size(), ErrorCode::DimensionMismatch, "weights and relatives differ in length");
  return w.cwiseProduct(y);
}

struct RegressionFit {
  double intercept = 0.0;
  Eigen::VectorXd coefs;
  Eigen::VectorXd residuals;
  double condition_number = 0.0;
};

inline constexpr double kMaxDesignCondition = 1e10;

/// Cross-sectional OLS of q on [1, f^1 .. f^K] through the normal equations.
/// `features` is N x K. Throws RankDeficient when the design has condition
/// number >= 1e10 or N <= K+1.
inline RegressionFit cross_sectional_ols(const Eigen::VectorXd& q, const Eigen::MatrixXd& features) {
  const auto n = features.rows();
  const auto k = features.cols();
  require(q.size() == n, ErrorCode::DimensionMismatch, "q and features differ in asset count");
  require(q.allFinite() && features.allFinite(), ErrorCode::NonFiniteInput, "non-finite regression input");
  require(n > k + 1, ErrorCode::RankDeficient,
          "cross-section of " + std::to_string(n) + " assets cannot identify " + std::to_string(k + 1) + " coefficients");

  Eigen::MatrixXd x(n, k + 1);
  x.col(0).setOnes();
  x.rightCols(k) = features;

  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(x);
  const auto& sv = svd.singularValues();
  const double cond = sv(sv.size() - 1) > 0.0 ? sv(0) / sv(sv.size() - 1) : std::numeric_limits<double>::infinity();
  require(cond < kMaxDesignCondition, ErrorCode::RankDeficient,
          "design matrix is (near) singular, condition number " + std::to_string(cond));

  const Eigen::MatrixXd xtx = x.transpose() * x;
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(xtx);
  Eigen::VectorXd beta = ldlt.solve(x.transpose() * q);
  // one step of iterative refinement
  beta += ldlt.solve(x.transpose() * (q - x * beta));

  RegressionFit fit;
  fit.intercept = beta(0);
  fit.coefs = beta.tail(k);
  fit.residuals = q - x * beta;
  fit.condition_number = cond;
  return fit;
}

/// beta(t)_k = beta_k(t) * sum_i f^k(t)_i.
inline Eigen::VectorXd reference_feature_weights(const RegressionFit& fit, const Eigen::MatrixXd& features) {
  require(fit.coefs.size() == features.cols(), ErrorCode::DimensionMismatch, "coefficient/feature count mismatch");
  return fit.coefs.cwiseProduct(features.colwise().sum().transpose());
}

/// Per-slot length-K weight vectors (beta(t), b(t) or M(t)).
struct FeatureWeightSeries {
  std::vector<std::size_t> slots;
  std::vector<Eigen::VectorXd> weights;

  std::size_t size() const { return slots.size(); }
  void push(std::size_t slot, Eigen::VectorXd w) {
    slots.push_back(slot);
    weights.push_back(std::move(w));
  }
};

/// beta^W(t) = (beta(t) + ... + beta(t+W-1)) / W, emitted for every t whose W
/// forward slots are all present in the series.
inline FeatureWeightSeries smooth_reference(const FeatureWeightSeries& series, std::size_t window) {
  require(window >= 1, ErrorCode::WindowTooLong, "smoothing window must be >= 1");
  require(series.size() >= window, ErrorCode::WindowTooLong,
          "series of " + std::to_string(series.size()) + " slots is shorter than W=" + std::to_string(window));
  FeatureWeightSeries out;
  for (std::size_t j = 0; j + window <= series.size(); ++j) {
    if (series.slots[j + window - 1] - series.slots[j] != window - 1) continue;
    Eigen::VectorXd acc = series.weights[j];
    for (std::size_t l = 1; l < window; ++l) acc += series.weights[j + l];
    out.push(series.slots[j], acc / static_cast<double>(window));
  }
  return out;
}

struct SkippedSlot {
  std::size_t slot = 0;
  std::string reason;
};

struct ReferenceResult {
  FeatureWeightSeries beta;
  // Hindsight weights for every slot that reached the optimizer.
  std::vector<PortfolioWeights> weights;
  std::vector<SkippedSlot> skipped;
};

struct ReferenceConfig {
  double lambda = 0.5;
  std::size_t cov_window = 60;
  SolverOptions solver{};
};

/// Reference feature weights for slots first..last: hindsight weights ->
/// q(t) -> cross-sectional OLS -> beta(t). Slots that fail are skipped and
/// recorded with the reason.
inline ReferenceResult reference_pipeline(const PricePanel& panel, const FeatureTensor& scaled, std::size_t first,
                                          std::size_t last, const ReferenceConfig& cfg = {}) {
  ReferenceResult out;
  for (std::size_t t = first; t <= last; ++t) {
    try {
      const RelativeVector y = price_relatives(panel, t);
      const CovEstimate cov = realized_covariance(panel, t, cfg.cov_window);
      MVSolution sol = hindsight_weights(y, cov, cfg.lambda, cfg.solver);
      out.weights.push_back(sol.weights);
      const Eigen::MatrixXd f = features_known_at(scaled, t);
      const RegressionFit fit = cross_sectional_ols(value_relatives(sol.weights.values, y.values), f);
      out.beta.push(t, reference_feature_weights(fit, f));
    } catch (const Error& e) {
      out.skipped.push_back({t, e.what()});
    }
  }
  return out;
}

}  // namespace hattrib
