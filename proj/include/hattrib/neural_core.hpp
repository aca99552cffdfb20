#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hattrib/error.hpp"
#include "hattrib/random.hpp"

namespace hattrib {

enum class Activation { Tanh, Relu, Identity, Softmax };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::Identity: return "identity";
    case Activation::Softmax: return "softmax";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  if (s == "identity") return Activation::Identity;
  if (s == "softmax") return Activation::Softmax;
  fail(ErrorCode::BadArchitecture, "unknown activation '" + s + "'");
}

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;
  Activation activation = Activation::Identity;
};

namespace detail {
inline std::uint64_t next_param_stamp() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

/// Multi-layer perceptron in double precision. Copies are independent.
///
/// `stamp` identifies the current parameter values: every optimizer step
/// assigns a fresh one, so a ForwardCache taken before an update is detected
/// as stale. Code that edits `layers` directly should call touch().
struct DenseNet {
  std::vector<DenseLayer> layers;
  std::uint64_t seed = 0;
  std::uint64_t stamp = detail::next_param_stamp();

  Eigen::Index input_dim() const { return layers.empty() ? 0 : layers.front().weight.cols(); }
  Eigen::Index output_dim() const { return layers.empty() ? 0 : layers.back().weight.rows(); }
  void touch() { stamp = detail::next_param_stamp(); }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }
};

inline void validate_architecture(const std::vector<int>& dims, const std::vector<Activation>& acts) {
  require(dims.size() >= 2, ErrorCode::BadArchitecture, "need at least input and output sizes");
  require(acts.size() == dims.size() - 1, ErrorCode::BadArchitecture, "need one activation per layer");
  for (int d : dims) require(d >= 1, ErrorCode::BadArchitecture, "layer sizes must be positive");
  for (std::size_t l = 0; l + 1 < acts.size(); ++l)
    require(acts[l] != Activation::Softmax, ErrorCode::BadArchitecture, "softmax is only allowed on the last layer");
}

/// Glorot-uniform weights, zero biases. Weights are drawn layer by layer in
/// row-major (output, input) order from Rng(seed).uniform(-a, a) with
/// a = sqrt(6 / (fan_in + fan_out)).
inline DenseNet init_net(const std::vector<int>& dims, const std::vector<Activation>& acts, std::uint64_t seed) {
  validate_architecture(dims, acts);
  Rng rng(seed);
  DenseNet net;
  net.seed = seed;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    DenseLayer layer;
    const int fan_in = dims[l];
    const int fan_out = dims[l + 1];
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    layer.weight.resize(fan_out, fan_in);
    for (int r = 0; r < fan_out; ++r)
      for (int c = 0; c < fan_in; ++c) layer.weight(r, c) = rng.uniform(-a, a);
    layer.bias = Eigen::VectorXd::Zero(fan_out);
    layer.activation = acts[l];
    net.layers.push_back(std::move(layer));
  }
  return net;
}

struct ForwardCache {
  std::vector<Eigen::VectorXd> pre;   // z_l = W_l a_{l-1} + b_l
  std::vector<Eigen::VectorXd> post;  // a_0 = x, a_l = act(z_l)
  std::uint64_t stamp = 0;

  const Eigen::VectorXd& output() const { return post.back(); }
};

namespace detail {

inline Eigen::VectorXd softmax(const Eigen::VectorXd& z) {
  const double m = z.maxCoeff();
  Eigen::VectorXd e = (z.array() - m).exp().matrix();
  return e / e.sum();
}

inline Eigen::VectorXd activate(Activation a, const Eigen::VectorXd& z) {
  switch (a) {
    case Activation::Tanh: return z.array().tanh().matrix();
    case Activation::Relu: return z.cwiseMax(0.0);
    case Activation::Identity: return z;
    case Activation::Softmax: return softmax(z);
  }
  return z;
}

// Vector-Jacobian product of the activation at (z, a = act(z)).
inline Eigen::VectorXd activation_vjp(Activation act, const Eigen::VectorXd& z, const Eigen::VectorXd& a,
                                      const Eigen::VectorXd& upstream) {
  switch (act) {
    case Activation::Tanh: return upstream.cwiseProduct((1.0 - a.array().square()).matrix());
    case Activation::Relu: return (z.array() > 0.0).select(upstream, 0.0);
    case Activation::Identity: return upstream;
    case Activation::Softmax: return a.cwiseProduct((upstream.array() - a.dot(upstream)).matrix());
  }
  return upstream;
}

}  // namespace detail

inline ForwardCache forward(const DenseNet& net, const Eigen::VectorXd& x) {
  require(!net.layers.empty(), ErrorCode::BadArchitecture, "empty network");
  require(x.size() == net.input_dim(), ErrorCode::DimensionMismatch,
          "input of size " + std::to_string(x.size()) + " for network expecting " + std::to_string(net.input_dim()));
  ForwardCache cache;
  cache.stamp = net.stamp;
  cache.post.reserve(net.layers.size() + 1);
  cache.pre.reserve(net.layers.size());
  cache.post.push_back(x);
  for (const auto& layer : net.layers) {
    Eigen::VectorXd z = layer.weight * cache.post.back() + layer.bias;
    cache.post.push_back(detail::activate(layer.activation, z));
    cache.pre.push_back(std::move(z));
  }
  return cache;
}

inline Eigen::VectorXd predict(const DenseNet& net, const Eigen::VectorXd& x) { return forward(net, x).output(); }

struct LayerGrad {
  Eigen::MatrixXd weight;
  Eigen::VectorXd bias;
};

struct GradientBundle {
  std::vector<LayerGrad> params;
  Eigen::VectorXd input;

  static GradientBundle zeros_like(const DenseNet& net) {
    GradientBundle g;
    for (const auto& l : net.layers)
      g.params.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()), Eigen::VectorXd::Zero(l.bias.size())});
    g.input = Eigen::VectorXd::Zero(net.input_dim());
    return g;
  }

  GradientBundle& operator+=(const GradientBundle& o) {
    require(o.params.size() == params.size(), ErrorCode::ShapeMismatch, "gradient bundles differ in depth");
    for (std::size_t l = 0; l < params.size(); ++l) {
      params[l].weight += o.params[l].weight;
      params[l].bias += o.params[l].bias;
    }
    if (input.size() == o.input.size()) input += o.input;
    return *this;
  }

  GradientBundle& operator*=(double s) {
    for (auto& p : params) {
      p.weight *= s;
      p.bias *= s;
    }
    input *= s;
    return *this;
  }

  bool all_finite() const {
    for (const auto& p : params)
      if (!p.weight.allFinite() || !p.bias.allFinite()) return false;
    return input.allFinite();
  }
};

/// Gradients of <upstream, output> with respect to every parameter and to
/// the input.
inline GradientBundle backward(const DenseNet& net, const ForwardCache& cache, const Eigen::VectorXd& upstream) {
  require(cache.stamp == net.stamp && cache.post.size() == net.layers.size() + 1, ErrorCode::StaleCache,
          "forward cache does not belong to the current parameters");
  require(upstream.size() == net.output_dim(), ErrorCode::DimensionMismatch, "upstream gradient has wrong size");
  GradientBundle g;
  g.params.resize(net.layers.size());
  Eigen::VectorXd delta = upstream;
  for (std::size_t l = net.layers.size(); l-- > 0;) {
    const auto& layer = net.layers[l];
    const Eigen::VectorXd dz = detail::activation_vjp(layer.activation, cache.pre[l], cache.post[l + 1], delta);
    g.params[l].weight = dz * cache.post[l].transpose();
    g.params[l].bias = dz;
    delta = layer.weight.transpose() * dz;
  }
  g.input = std::move(delta);
  return g;
}

namespace detail {
inline void check_shapes(const DenseNet& net, const GradientBundle& g) {
  require(g.params.size() == net.layers.size(), ErrorCode::ShapeMismatch, "gradient depth differs from network");
  for (std::size_t l = 0; l < net.layers.size(); ++l)
    require(g.params[l].weight.rows() == net.layers[l].weight.rows() &&
                g.params[l].weight.cols() == net.layers[l].weight.cols() &&
                g.params[l].bias.size() == net.layers[l].bias.size(),
            ErrorCode::ShapeMismatch, "gradient shape differs from layer " + std::to_string(l));
}
}  // namespace detail

/// theta <- theta - lr * grad
inline void sgd_step(DenseNet& net, const GradientBundle& g, double lr) {
  detail::check_shapes(net, g);
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    net.layers[l].weight -= lr * g.params[l].weight;
    net.layers[l].bias -= lr * g.params[l].bias;
  }
  net.touch();
}

struct AdamState {
  std::vector<LayerGrad> m;
  std::vector<LayerGrad> v;
  std::int64_t step = 0;

  static AdamState for_net(const DenseNet& net) {
    AdamState s;
    const auto z = GradientBundle::zeros_like(net);
    s.m = z.params;
    s.v = z.params;
    return s;
  }
};

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam descent step.
inline void adam_step(DenseNet& net, const GradientBundle& g, AdamState& state, double lr, const AdamParams& hp = {}) {
  detail::check_shapes(net, g);
  if (state.m.empty()) state = AdamState::for_net(net);
  require(state.m.size() == net.layers.size(), ErrorCode::ShapeMismatch, "Adam state does not match network");
  ++state.step;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  auto update = [&](auto& param, auto& m, auto& v, const auto& grad) {
    m = hp.beta1 * m + (1.0 - hp.beta1) * grad;
    v = hp.beta2 * v + (1.0 - hp.beta2) * grad.cwiseProduct(grad);
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + hp.eps);
  };
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    update(net.layers[l].weight, state.m[l].weight, state.v[l].weight, g.params[l].weight);
    update(net.layers[l].bias, state.m[l].bias, state.v[l].bias, g.params[l].bias);
  }
  net.touch();
}

// Flat parameter order: per layer, weight row-major then bias.
inline std::vector<double> flat_params(const DenseNet& net) {
  std::vector<double> out;
  out.reserve(net.num_params());
  for (const auto& l : net.layers) {
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) out.push_back(l.weight(r, c));
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) out.push_back(l.bias(r));
  }
  return out;
}

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json net_to_json(const DenseNet& net) {
  std::vector<int> dims{static_cast<int>(net.input_dim())};
  std::vector<std::string> acts;
  for (const auto& l : net.layers) {
    dims.push_back(static_cast<int>(l.weight.rows()));
    acts.push_back(to_string(l.activation));
  }
  return {{"format", "hattrib.densenet"}, {"version", kCheckpointVersion}, {"dims", dims},
          {"activations", acts},          {"seed", net.seed},                {"params", flat_params(net)}};
}

inline DenseNet net_from_json(const nlohmann::json& j) {
  require(j.value("format", "") == "hattrib.densenet", ErrorCode::ArtifactMismatch, "not a network checkpoint");
  require(j.value("version", 0) == kCheckpointVersion, ErrorCode::ArtifactMismatch, "unsupported checkpoint version");
  const auto dims = j.at("dims").get<std::vector<int>>();
  std::vector<Activation> acts;
  for (const auto& s : j.at("activations").get<std::vector<std::string>>()) acts.push_back(activation_from_string(s));
  DenseNet net = init_net(dims, acts, j.at("seed").get<std::uint64_t>());
  const auto params = j.at("params").get<std::vector<double>>();
  require(params.size() == net.num_params(), ErrorCode::ArtifactMismatch, "checkpoint parameter count mismatch");
  std::size_t p = 0;
  for (auto& l : net.layers) {
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = params[p++];
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias(r) = params[p++];
  }
  net.touch();
  return net;
}

}  // namespace hattrib
