#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include "hattrib/error.hpp"
#include "hattrib/features.hpp"
#include "hattrib/hindsight_reference.hpp"
#include "hattrib/market_data.hpp"
#include "hattrib/mean_variance.hpp"
#include "hattrib/random.hpp"

namespace hattrib {

enum class ModelKind { LinearRegression, DecisionTree, RandomForest, LinearSVR };

inline std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::LinearRegression: return "lr";
    case ModelKind::DecisionTree: return "dt";
    case ModelKind::RandomForest: return "rf";
    case ModelKind::LinearSVR: return "svm";
  }
  return "?";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "lr") return ModelKind::LinearRegression;
  if (s == "dt") return ModelKind::DecisionTree;
  if (s == "rf") return ModelKind::RandomForest;
  if (s == "svm") return ModelKind::LinearSVR;
  fail(ErrorCode::ConfigError, "unknown model '" + s + "' (expected lr, dt, rf or svm)");
}

struct MLParams {
  // Trees. max_depth < 0 means unlimited.
  int max_depth = 6;
  std::size_t min_leaf = 20;
  std::size_t n_trees = 50;
  // Features tried per split in a forest; 0 means ceil(sqrt(K)).
  std::size_t max_features = 0;
  bool bootstrap = true;
  // Linear SVR: 0.5 |w|^2 + C * sum max(0, |r| - eps) on standardized data.
  double svr_epsilon = 0.01;
  double svr_c = 1.0;
  int svr_epochs = 300;
  double svr_lr = 0.1;
};

inline nlohmann::json to_json(const MLParams& p) {
  return {{"max_depth", p.max_depth}, {"min_leaf", p.min_leaf},       {"n_trees", p.n_trees},
          {"max_features", p.max_features}, {"bootstrap", p.bootstrap}, {"svr_epsilon", p.svr_epsilon},
          {"svr_c", p.svr_c},         {"svr_epochs", p.svr_epochs},   {"svr_lr", p.svr_lr}};
}

inline MLParams ml_params_from_json(const nlohmann::json& j) {
  MLParams p;
  p.max_depth = j.value("max_depth", p.max_depth);
  p.min_leaf = j.value("min_leaf", p.min_leaf);
  p.n_trees = j.value("n_trees", p.n_trees);
  p.max_features = j.value("max_features", p.max_features);
  p.bootstrap = j.value("bootstrap", p.bootstrap);
  p.svr_epsilon = j.value("svr_epsilon", p.svr_epsilon);
  p.svr_c = j.value("svr_c", p.svr_c);
  p.svr_epochs = j.value("svr_epochs", p.svr_epochs);
  p.svr_lr = j.value("svr_lr", p.svr_lr);
  require(p.min_leaf >= 1 && p.n_trees >= 1 && p.svr_epsilon >= 0.0 && p.svr_c > 0.0 && p.svr_epochs >= 1 &&
              p.svr_lr > 0.0,
          ErrorCode::ConfigError, "invalid ML hyperparameters");
  return p;
}

// ---- linear regression ----

struct LinearRegression {
  double intercept = 0.0;
  Eigen::VectorXd coefs;

  double predict(const Eigen::RowVectorXd& x) const { return intercept + x.dot(coefs.transpose()); }
};

inline LinearRegression fit_linear_regression(const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
  Eigen::MatrixXd d(x.rows(), x.cols() + 1);
  d.col(0).setOnes();
  d.rightCols(x.cols()) = x;
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(d);
  require(qr.rank() == d.cols(), ErrorCode::RankDeficient, "linear regression design is rank deficient");
  const Eigen::VectorXd beta = qr.solve(y);
  return {beta(0), beta.tail(x.cols())};
}

// ---- CART ----

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;
};

/// Regression tree; x goes left when x[feature] <= threshold.
struct DecisionTree {
  std::vector<TreeNode> nodes;

  double predict(const Eigen::RowVectorXd& x) const {
    int n = 0;
    while (nodes[static_cast<std::size_t>(n)].feature >= 0) {
      const auto& node = nodes[static_cast<std::size_t>(n)];
      n = x(node.feature) <= node.threshold ? node.left : node.right;
    }
    return nodes[static_cast<std::size_t>(n)].value;
  }
};

namespace detail {

struct TreeBuilder {
  const Eigen::MatrixXd& x;
  const Eigen::VectorXd& y;
  int max_depth;
  std::size_t min_leaf;
  std::size_t max_features;  // features tried per split
  Rng* rng;                  // null: try every feature in order
  DecisionTree tree;

  int build(std::vector<std::size_t>& idx, int depth) {
    double sum = 0.0;
    for (auto i : idx) sum += y(static_cast<Eigen::Index>(i));
    const double mean = sum / static_cast<double>(idx.size());
    const int id = static_cast<int>(tree.nodes.size());
    tree.nodes.push_back({-1, 0.0, -1, -1, mean});
    if ((max_depth >= 0 && depth >= max_depth) || idx.size() < 2 * min_leaf) return id;

    double sse = 0.0;
    for (auto i : idx) sse += (y(static_cast<Eigen::Index>(i)) - mean) * (y(static_cast<Eigen::Index>(i)) - mean);
    if (sse <= 0.0) return id;

    std::vector<int> feats(static_cast<std::size_t>(x.cols()));
    std::iota(feats.begin(), feats.end(), 0);
    if (rng != nullptr && max_features < feats.size()) {
      for (std::size_t j = 0; j < max_features; ++j) std::swap(feats[j], feats[j + rng->index(feats.size() - j)]);
      feats.resize(max_features);
      std::sort(feats.begin(), feats.end());
    }

    // Maximize the between-child term S_L^2/n_L + S_R^2/n_R, which is
    // equivalent to minimizing the children's summed squared error.
    double best_gain = 0.0;
    int best_feature = -1;
    double best_threshold = 0.0;
    const double base = sum * sum / static_cast<double>(idx.size());
    std::vector<std::size_t> sorted = idx;
    for (int f : feats) {
      std::stable_sort(sorted.begin(), sorted.end(), [&](std::size_t a, std::size_t b) {
        return x(static_cast<Eigen::Index>(a), f) < x(static_cast<Eigen::Index>(b), f);
      });
      double left_sum = 0.0;
      for (std::size_t j = 0; j + 1 < sorted.size(); ++j) {
        left_sum += y(static_cast<Eigen::Index>(sorted[j]));
        const double xa = x(static_cast<Eigen::Index>(sorted[j]), f);
        const double xb = x(static_cast<Eigen::Index>(sorted[j + 1]), f);
        const std::size_t nl = j + 1;
        const std::size_t nr = sorted.size() - nl;
        if (xa == xb || nl < min_leaf || nr < min_leaf) continue;
        const double right_sum = sum - left_sum;
        const double gain = left_sum * left_sum / static_cast<double>(nl) +
                            right_sum * right_sum / static_cast<double>(nr) - base;
        if (gain > best_gain * (1.0 + 1e-12) + 1e-300) {
          best_gain = gain;
          best_feature = f;
          best_threshold = 0.5 * (xa + xb);
        }
      }
    }
    if (best_feature < 0) return id;

    std::vector<std::size_t> left;
    std::vector<std::size_t> right;
    for (auto i : idx)
      (x(static_cast<Eigen::Index>(i), best_feature) <= best_threshold ? left : right).push_back(i);
    if (left.empty() || right.empty()) return id;
    idx.clear();
    idx.shrink_to_fit();
    const int l = build(left, depth + 1);
    const int r = build(right, depth + 1);
    auto& node = tree.nodes[static_cast<std::size_t>(id)];
    node.feature = best_feature;
    node.threshold = best_threshold;
    node.left = l;
    node.right = r;
    return id;
  }
};

}  // namespace detail

inline DecisionTree fit_tree(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, std::vector<std::size_t> idx,
                             int max_depth, std::size_t min_leaf, std::size_t max_features = 0, Rng* rng = nullptr) {
  detail::TreeBuilder b{x, y, max_depth, std::max<std::size_t>(min_leaf, 1), max_features, rng, {}};
  b.build(idx, 0);
  return std::move(b.tree);
}

inline DecisionTree fit_decision_tree(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const MLParams& p) {
  std::vector<std::size_t> idx(static_cast<std::size_t>(x.rows()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return fit_tree(x, y, std::move(idx), p.max_depth, p.min_leaf);
}

struct RandomForest {
  std::vector<DecisionTree> trees;

  double predict(const Eigen::RowVectorXd& x) const {
    double s = 0.0;
    for (const auto& t : trees) s += t.predict(x);
    return s / static_cast<double>(trees.size());
  }
};

/// Tree j draws its bootstrap sample and split features from
/// Rng(derive_seed(seed, j)).
inline RandomForest fit_random_forest(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const MLParams& p,
                                      std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(x.rows());
  const auto k = static_cast<std::size_t>(x.cols());
  const std::size_t mf =
      p.max_features == 0 ? static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(k))))
                          : std::min(p.max_features, k);
  RandomForest rf;
  for (std::size_t j = 0; j < p.n_trees; ++j) {
    Rng rng(derive_seed(seed, j));
    std::vector<std::size_t> idx(n);
    if (p.bootstrap)
      for (auto& i : idx) i = rng.index(n);
    else
      std::iota(idx.begin(), idx.end(), std::size_t{0});
    rf.trees.push_back(fit_tree(x, y, std::move(idx), p.max_depth, p.min_leaf, mf, &rng));
  }
  return rf;
}

// ---- linear SVR ----

struct LinearSVR {
  Eigen::RowVectorXd x_mean;
  Eigen::RowVectorXd x_scale;
  double y_mean = 0.0;
  double y_scale = 1.0;
  Eigen::VectorXd w;  // in standardized units
  double b = 0.0;
  // Best objective seen after each epoch (non-increasing).
  std::vector<double> objective_trace;

  double predict(const Eigen::RowVectorXd& x) const {
    const Eigen::RowVectorXd z = (x - x_mean).cwiseQuotient(x_scale);
    return y_mean + y_scale * (z.dot(w.transpose()) + b);
  }
};

/// Full-batch subgradient descent on 0.5|w|^2/n + C mean(max(0, |r| - eps))
/// with step lr / sqrt(epoch + 1). The best iterate is kept.
inline LinearSVR fit_linear_svr(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const MLParams& p) {
  const auto n = x.rows();
  const double dn = static_cast<double>(n);
  LinearSVR m;
  m.x_mean = x.colwise().mean();
  m.x_scale = ((x.rowwise() - m.x_mean).array().square().colwise().sum() / dn).sqrt().matrix();
  for (Eigen::Index c = 0; c < m.x_scale.size(); ++c)
    if (!(m.x_scale(c) > 0.0)) m.x_scale(c) = 1.0;
  m.y_mean = y.mean();
  m.y_scale = std::sqrt((y.array() - m.y_mean).square().sum() / dn);
  require(m.y_scale > 0.0, ErrorCode::DegenerateTarget, "SVR target has zero variance");

  const Eigen::MatrixXd z = (x.rowwise() - m.x_mean).array().rowwise() / m.x_scale.array();
  const Eigen::VectorXd t = (y.array() - m.y_mean) / m.y_scale;

  auto objective = [&](const Eigen::VectorXd& w, double b, Eigen::VectorXd& resid) {
    resid = t - (z * w).array().matrix() - Eigen::VectorXd::Constant(n, b);
    const double loss = (resid.array().abs() - p.svr_epsilon).max(0.0).sum();
    return 0.5 * w.squaredNorm() / dn + p.svr_c * loss / dn;
  };

  Eigen::VectorXd w = Eigen::VectorXd::Zero(x.cols());
  double b = 0.0;
  Eigen::VectorXd resid;
  double best = objective(w, b, resid);
  m.w = w;
  m.b = b;
  for (int e = 0; e < p.svr_epochs; ++e) {
    // d loss / d prediction: -1 above the tube, +1 below, 0 inside
    const Eigen::VectorXd d = (resid.array() > p.svr_epsilon)
                                  .select(-1.0, (resid.array() < -p.svr_epsilon).select(1.0, Eigen::VectorXd::Zero(n)));
    const Eigen::VectorXd gw = w / dn + p.svr_c * (z.transpose() * d) / dn;
    const double gb = p.svr_c * d.sum() / dn;
    const double lr = p.svr_lr / std::sqrt(static_cast<double>(e) + 1.0);
    w -= lr * gw;
    b -= lr * gb;
    const double obj = objective(w, b, resid);
    if (obj < best) {
      best = obj;
      m.w = w;
      m.b = b;
    }
    m.objective_trace.push_back(best);
  }
  return m;
}

// ---- unified model ----

struct RegressorModel {
  ModelKind kind = ModelKind::LinearRegression;
  MLParams params;
  std::uint64_t seed = 0;
  std::variant<std::monostate, LinearRegression, DecisionTree, RandomForest, LinearSVR> fitted;

  bool is_fitted() const { return !std::holds_alternative<std::monostate>(fitted); }

  double predict(const Eigen::RowVectorXd& x) const {
    require(is_fitted(), ErrorCode::ModelNotFitted, "model has not been fitted");
    return std::visit(
        [&](const auto& m) -> double {
          if constexpr (std::is_same_v<std::decay_t<decltype(m)>, std::monostate>)
            return 0.0;
          else
            return m.predict(x);
        },
        fitted);
  }
};

inline RegressorModel fit(ModelKind kind, const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const MLParams& p = {},
                          std::uint64_t seed = 0) {
  require(x.rows() >= 2, ErrorCode::TooFewSamples, "need at least 2 samples");
  require(y.size() == x.rows(), ErrorCode::DimensionMismatch, "X and y differ in sample count");
  require(x.allFinite() && y.allFinite(), ErrorCode::NonFiniteInput, "non-finite training data");
  RegressorModel m;
  m.kind = kind;
  m.params = p;
  m.seed = seed;
  switch (kind) {
    case ModelKind::LinearRegression: m.fitted = fit_linear_regression(x, y); break;
    case ModelKind::DecisionTree: m.fitted = fit_decision_tree(x, y, p); break;
    case ModelKind::RandomForest: m.fitted = fit_random_forest(x, y, p, seed); break;
    case ModelKind::LinearSVR: m.fitted = fit_linear_svr(x, y, p); break;
  }
  return m;
}

/// Pooled training samples: one row per (slot, asset) with the asset's
/// beginning-of-slot features and its relative y_i(t) as target. Rows are
/// slot-major.
struct TrainingSet {
  Eigen::MatrixXd x;
  Eigen::VectorXd y;
};

inline TrainingSet make_training_set(const PricePanel& panel, const FeatureTensor& scaled, std::size_t first,
                                     std::size_t last) {
  require(first >= 1 && first <= last && last <= panel.last_slot(), ErrorCode::SlotOutOfRange, "bad training range");
  const auto n = static_cast<Eigen::Index>(panel.num_assets());
  const auto slots = static_cast<Eigen::Index>(last - first + 1);
  TrainingSet ts;
  ts.x.resize(n * slots, static_cast<Eigen::Index>(scaled.num_features()));
  ts.y.resize(n * slots);
  for (std::size_t t = first; t <= last; ++t) {
    const auto r0 = static_cast<Eigen::Index>(t - first) * n;
    ts.x.middleRows(r0, n) = features_known_at(scaled, t);
    ts.y.segment(r0, n) = price_relatives(panel, t).values;
  }
  return ts;
}

/// y-hat(t): one prediction per asset from its own K feature values (N x K).
inline Eigen::VectorXd predict_returns(const RegressorModel& model, const Eigen::MatrixXd& features) {
  Eigen::VectorXd out(features.rows());
  for (Eigen::Index i = 0; i < features.rows(); ++i) out(i) = model.predict(features.row(i));
  return out;
}

inline PortfolioWeights ml_strategy_weights(const RegressorModel& model, const Eigen::MatrixXd& features,
                                            const CovEstimate& sigma_hat, double lambda = 0.5,
                                            const SolverOptions& opt = {}) {
  PortfolioWeights w = solve(MVProblem{predict_returns(model, features), sigma_hat.matrix, lambda}, opt).weights;
  w.slot = sigma_hat.slot;
  return w;
}

/// b(t): cross-sectional OLS of q*(t) = w*(t) (elementwise) y(t) on the
/// features, times each feature's cross-sectional sum.
inline Eigen::VectorXd ml_feature_weights(const Eigen::VectorXd& w, const Eigen::VectorXd& y,
                                          const Eigen::MatrixXd& features) {
  return reference_feature_weights(cross_sectional_ols(value_relatives(w, y), features), features);
}

// ---- dumps ----

namespace detail {
inline nlohmann::json tree_to_json(const DecisionTree& t) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : t.nodes) nodes.push_back({n.feature, n.threshold, n.left, n.right, n.value});
  return nodes;
}

inline DecisionTree tree_from_json(const nlohmann::json& j) {
  DecisionTree t;
  for (const auto& n : j) t.nodes.push_back({n.at(0).get<int>(), n.at(1).get<double>(), n.at(2).get<int>(),
                                             n.at(3).get<int>(), n.at(4).get<double>()});
  const auto sz = static_cast<int>(t.nodes.size());
  require(sz > 0, ErrorCode::ArtifactMismatch, "empty tree");
  for (const auto& n : t.nodes)
    require(n.feature < 0 || (n.left > 0 && n.left < sz && n.right > 0 && n.right < sz), ErrorCode::ArtifactMismatch,
            "tree node points outside the tree");
  return t;
}

inline std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }
inline Eigen::VectorXd from_vec(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}
}  // namespace detail

inline nlohmann::json model_to_json(const RegressorModel& m) {
  require(m.is_fitted(), ErrorCode::ModelNotFitted, "cannot dump an unfitted model");
  nlohmann::json j{{"format", "hattrib.regressor"},
                   {"version", 1},
                   {"kind", to_string(m.kind)},
                   {"seed", m.seed},
                   {"params", to_json(m.params)}};
  if (const auto* lr = std::get_if<LinearRegression>(&m.fitted)) {
    j["intercept"] = lr->intercept;
    j["coefs"] = detail::to_vec(lr->coefs);
  } else if (const auto* dt = std::get_if<DecisionTree>(&m.fitted)) {
    j["tree"] = detail::tree_to_json(*dt);
  } else if (const auto* rf = std::get_if<RandomForest>(&m.fitted)) {
    j["trees"] = nlohmann::json::array();
    for (const auto& t : rf->trees) j["trees"].push_back(detail::tree_to_json(t));
  } else if (const auto* svr = std::get_if<LinearSVR>(&m.fitted)) {
    j["x_mean"] = detail::to_vec(svr->x_mean.transpose());
    j["x_scale"] = detail::to_vec(svr->x_scale.transpose());
    j["y_mean"] = svr->y_mean;
    j["y_scale"] = svr->y_scale;
    j["w"] = detail::to_vec(svr->w);
    j["b"] = svr->b;
    j["objective_trace"] = svr->objective_trace;
  }
  return j;
}

inline RegressorModel model_from_json(const nlohmann::json& j) {
  require(j.value("format", "") == "hattrib.regressor", ErrorCode::ArtifactMismatch, "not a regressor dump");
  RegressorModel m;
  m.kind = model_kind_from_string(j.at("kind").get<std::string>());
  m.seed = j.at("seed").get<std::uint64_t>();
  m.params = ml_params_from_json(j.at("params"));
  switch (m.kind) {
    case ModelKind::LinearRegression:
      m.fitted = LinearRegression{j.at("intercept").get<double>(), detail::from_vec(j.at("coefs"))};
      break;
    case ModelKind::DecisionTree: m.fitted = detail::tree_from_json(j.at("tree")); break;
    case ModelKind::RandomForest: {
      RandomForest rf;
      for (const auto& t : j.at("trees")) rf.trees.push_back(detail::tree_from_json(t));
      m.fitted = std::move(rf);
      break;
    }
    case ModelKind::LinearSVR: {
      LinearSVR s;
      s.x_mean = detail::from_vec(j.at("x_mean")).transpose();
      s.x_scale = detail::from_vec(j.at("x_scale")).transpose();
      s.y_mean = j.at("y_mean").get<double>();
      s.y_scale = j.at("y_scale").get<double>();
      s.w = detail::from_vec(j.at("w"));
      s.b = j.at("b").get<double>();
      s.objective_trace = j.at("objective_trace").get<std::vector<double>>();
      m.fitted = std::move(s);
      break;
    }
  }
  return m;
}

}  // namespace hattrib
