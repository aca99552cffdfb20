#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "hattrib/error.hpp"
#include "hattrib/market_data.hpp"

namespace hattrib {

/// Allocation on the probability simplex for one slot.
struct PortfolioWeights {
  Eigen::VectorXd values;
  std::size_t slot = 0;
};

/// maximize w'mu - lambda w'Sigma w  subject to  sum(w) = 1, w >= 0.
struct MVProblem {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  double lambda = 0.5;
};

struct SolverOptions {
  double tol = 1e-8;
  int max_iters = 10000;
};

struct MVSolution {
  PortfolioWeights weights;
  double objective = 0.0;
  int iterations = 0;
  // False when max_iters was hit; weights then hold the best iterate.
  bool converged = false;
};

inline bool on_simplex(const Eigen::VectorXd& w, double tol = 1e-9) {
  return w.size() > 0 && w.allFinite() && (w.array() >= -tol).all() && (w.array() <= 1.0 + tol).all() &&
         std::abs(w.sum() - 1.0) <= tol;
}

/// Euclidean projection onto {w : sum w = 1, w >= 0} by sort and threshold.
/// Points already feasible to 1e-12 are returned unchanged, which makes the
/// projection exactly idempotent.
inline Eigen::VectorXd project_simplex(const Eigen::VectorXd& v) {
  require(v.size() > 0, ErrorCode::DimensionMismatch, "cannot project an empty vector");
  require(v.allFinite(), ErrorCode::NonFiniteInput, "simplex projection of non-finite vector");
  if ((v.array() >= 0.0).all() && std::abs(v.sum() - 1.0) <= 1e-12) return v;

  // The projection is invariant to a common shift; anchoring the largest
  // entry at 0 keeps huge gradient steps from swamping the threshold.
  const Eigen::VectorXd x = v.array() - v.maxCoeff();
  std::vector<double> u(x.data(), x.data() + x.size());
  std::sort(u.begin(), u.end(), std::greater<>());
  double cumsum = 0.0;
  double theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    cumsum += u[j];
    const double t = (cumsum - 1.0) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) theta = t;
  }
  Eigen::VectorXd w = (x.array() - theta).max(0.0).matrix();
  return w / w.sum();
}

inline double mv_objective(const MVProblem& p, const Eigen::VectorXd& w) {
  return w.dot(p.mu) - p.lambda * w.dot(p.sigma * w);
}

inline Eigen::VectorXd mv_gradient(const MVProblem& p, const Eigen::VectorXd& w) {
  return p.mu - 2.0 * p.lambda * (p.sigma * w);
}

inline void validate(const MVProblem& p) {
  const auto n = p.mu.size();
  require(n > 0, ErrorCode::DimensionMismatch, "empty mean vector");
  require(p.sigma.rows() == n && p.sigma.cols() == n, ErrorCode::DimensionMismatch, "sigma must be N x N");
  require(p.mu.allFinite() && p.sigma.allFinite(), ErrorCode::NonFiniteInput, "non-finite problem data");
  require(p.lambda > 0.0 && std::isfinite(p.lambda), ErrorCode::ConfigError, "risk aversion must be positive");
  require((p.sigma - p.sigma.transpose()).cwiseAbs().maxCoeff() <= 1e-10 * (1.0 + p.sigma.cwiseAbs().maxCoeff()),
          ErrorCode::NonFiniteInput, "sigma must be symmetric");
}

namespace detail {

// Maximizes the objective on the face {w_i = 0 for i outside support,
// sum w = 1} by solving its KKT system. Returns false when the face optimum
// leaves the simplex.
inline bool polish_on_support(const MVProblem& p, const std::vector<Eigen::Index>& support, Eigen::VectorXd& out) {
  const auto m = static_cast<Eigen::Index>(support.size());
  Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(m + 1, m + 1);
  Eigen::VectorXd rhs(m + 1);
  for (Eigen::Index a = 0; a < m; ++a) {
    for (Eigen::Index b = 0; b < m; ++b) kkt(a, b) = 2.0 * p.lambda * p.sigma(support[a], support[b]);
    kkt(a, m) = 1.0;
    kkt(m, a) = 1.0;
    rhs(a) = p.mu(support[a]);
  }
  rhs(m) = 1.0;
  const Eigen::FullPivLU<Eigen::MatrixXd> lu(kkt);
  if (!lu.isInvertible()) return false;
  const Eigen::VectorXd sol = lu.solve(rhs);
  if (!sol.allFinite() || (sol.head(m).array() < 0.0).any()) return false;
  out = Eigen::VectorXd::Zero(p.mu.size());
  for (Eigen::Index a = 0; a < m; ++a) out(support[a]) = sol(a);
  out /= out.sum();
  return true;
}

inline std::vector<Eigen::Index> support_of(const Eigen::VectorXd& w) {
  std::vector<Eigen::Index> s;
  for (Eigen::Index i = 0; i < w.size(); ++i)
    if (w(i) > 0.0) s.push_back(i);
  return s;
}

}  // namespace detail

/// Projected gradient ascent with backtracking, started from equal weights.
/// Once the active set stops changing, the face optimum is tried directly
/// and accepted if feasible and no worse.
inline MVSolution solve(const MVProblem& p, const SolverOptions& opt = {}) {
  validate(p);
  const auto n = p.mu.size();
  Eigen::VectorXd w = Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  double f = mv_objective(p, w);

  const double lip = 2.0 * p.lambda * p.sigma.cwiseAbs().rowwise().sum().maxCoeff();
  double step = lip > 0.0 ? 1.0 / lip : 1e12;
  step = std::min(step, 1e12);

  MVSolution out;
  std::vector<Eigen::Index> prev_support;
  for (int it = 1; it <= opt.max_iters; ++it) {
    out.iterations = it;
    // Only the component of the gradient within the simplex plane matters.
    Eigen::VectorXd g = mv_gradient(p, w);
    g.array() -= g.mean();
    double trial = std::min(step * 2.0, 1e12);
    Eigen::VectorXd next;
    double f_next = f;
    for (;;) {
      next = project_simplex(w + trial * g);
      const Eigen::VectorXd d = next - w;
      f_next = mv_objective(p, next);
      if (f_next >= f + g.dot(d) - d.squaredNorm() / (2.0 * trial) - 1e-15 * std::abs(f)) break;
      trial *= 0.5;
      if (trial < 1e-30) {
        next = w;
        f_next = f;
        break;
      }
    }
    step = trial;
    const double mapping_norm = (next - w).norm() / trial;
    if (f_next >= f) {
      w = next;
      f = f_next;
    }

    auto support = detail::support_of(w);
    if (support == prev_support) {
      Eigen::VectorXd polished;
      if (detail::polish_on_support(p, support, polished)) {
        const double fp = mv_objective(p, polished);
        if (fp >= f) {
          w = polished;
          f = fp;
        }
      }
    }
    prev_support = std::move(support);

    Eigen::VectorXd gw = mv_gradient(p, w);
    gw.array() -= gw.mean();
    const Eigen::VectorXd probe = project_simplex(w + step * gw);
    if (mapping_norm < opt.tol || (probe - w).norm() / step < opt.tol) {
      out.converged = true;
      break;
    }
  }
  out.weights.values = w;
  out.objective = f;
  return out;
}

/// Optimal weights when y(t) and the realized covariance are known.
inline MVSolution hindsight_weights(const RelativeVector& y, const CovEstimate& sigma_true, double lambda,
                                    const SolverOptions& opt = {}) {
  MVSolution s = solve(MVProblem{y.values, sigma_true.matrix, lambda}, opt);
  s.weights.slot = y.slot;
  return s;
}

}  // namespace hattrib
