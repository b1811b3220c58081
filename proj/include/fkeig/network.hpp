#pragma once
// The two periodic ansatz networks: a scalar head for the eigenfunction and a
// d-vector head for its scaled gradient. Inputs pass through a fixed
// trigonometric feature map before a ReLU MLP.

#include "fkeig/autodiff.hpp"
#include "fkeig/rng.hpp"

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace fkeig {

/// Feature layout for a point x in R^d with order M (2*M*d features):
///   [sin(1 x_1) .. sin(1 x_d), sin(2 x_1) .. sin(M x_d), cos(1 x_1) .. cos(M x_d)]
/// i.e. all sine blocks by harmonic, then all cosine blocks.
struct FeatureMap {
  std::size_t dim = 1;
  std::size_t order = 5;
  std::size_t size() const { return 2 * order * dim; }
};

inline std::vector<double> featurize(std::span<const double> x, std::size_t order) {
  if (order < 1) throw std::invalid_argument("feature order must be >= 1");
  const std::size_t d = x.size();
  std::vector<double> out(2 * order * d);
  for (std::size_t j = 1; j <= order; ++j) {
    for (std::size_t i = 0; i < d; ++i) {
      double arg = static_cast<double>(j) * x[i];
      out[(j - 1) * d + i] = std::sin(arg);
      out[order * d + (j - 1) * d + i] = std::cos(arg);
    }
  }
  return out;
}

/// Tape version: x is rows x d, result rows x 2Md with the same layout.
inline Var featurize(Var x, std::size_t order) {
  if (order < 1) throw std::invalid_argument("feature order must be >= 1");
  const std::size_t d = x.cols();
  Tensor freq(d, order * d);
  for (std::size_t j = 1; j <= order; ++j) {
    for (std::size_t i = 0; i < d; ++i) freq(i, (j - 1) * d + i) = static_cast<double>(j);
  }
  Var phase = matmul(x, x.tape().constant(freq));
  return concat_cols(sin(phase), cos(phase));
}

struct DenseLayer {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out
};

/// Fully connected head: ReLU on hidden layers, identity on the output layer.
struct MlpHead {
  std::vector<DenseLayer> layers;

  std::size_t in_dim() const { return layers.empty() ? 0 : layers.front().weight.rows(); }
  std::size_t out_dim() const { return layers.empty() ? 0 : layers.back().weight.cols(); }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  void validate() const {
    if (layers.empty()) throw std::invalid_argument("MLP head has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.bias.rows() != 1 || l.bias.cols() != l.weight.cols()) {
        throw ShapeError("layer " + std::to_string(i) + ": bias shape does not match weight");
      }
      if (i > 0 && layers[i - 1].weight.cols() != l.weight.rows()) {
        throw ShapeError("layer " + std::to_string(i) + ": input width does not chain");
      }
    }
  }
};

/// He-style uniform weights, U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases.
inline MlpHead make_head(std::size_t in_dim, std::span<const std::size_t> hidden,
                         std::size_t out_dim, CounterRng& rng) {
  MlpHead head;
  std::size_t fan_in = in_dim;
  auto add_layer = [&](std::size_t width) {
    if (width == 0) throw std::invalid_argument("layer width must be positive");
    DenseLayer l{Tensor(fan_in, width), Tensor(1, width)};
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (double& w : l.weight.values()) w = rng.uniform(-bound, bound);
    head.layers.push_back(std::move(l));
    fan_in = width;
  };
  for (std::size_t w : hidden) add_layer(w);
  add_layer(out_dim);
  return head;
}

struct NetworkParams {
  FeatureMap features;
  MlpHead psi;   // 2Md -> 1
  MlpHead grad;  // 2Md -> d
  double lambda = 0.0;

  std::size_t dim() const { return features.dim; }

  void validate() const {
    psi.validate();
    grad.validate();
    if (psi.in_dim() != features.size() || grad.in_dim() != features.size()) {
      throw ShapeError("network heads do not match the feature map size");
    }
    if (psi.out_dim() != 1) throw ShapeError("psi head must have scalar output");
    if (grad.out_dim() != features.dim) throw ShapeError("gradient head must output d values");
  }

  /// Weight and bias tensors in a fixed order: psi layers, then gradient layers.
  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out;
    for (auto* head : {&psi, &grad}) {
      for (auto& l : head->layers) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
      }
    }
    return out;
  }
  std::vector<const Tensor*> tensors() const {
    std::vector<const Tensor*> out;
    for (const auto* head : {&psi, &grad}) {
      for (const auto& l : head->layers) {
        out.push_back(&l.weight);
        out.push_back(&l.bias);
      }
    }
    return out;
  }
};

inline NetworkParams init_network(std::size_t dim, std::size_t order,
                                  std::span<const std::size_t> hidden, double lambda_init,
                                  std::uint64_t seed) {
  NetworkParams p;
  p.features = FeatureMap{dim, order};
  CounterRng psi_rng(seed, StreamTag::Weights, 0, 0);
  CounterRng grad_rng(seed, StreamTag::Weights, 0, 1);
  p.psi = make_head(p.features.size(), hidden, 1, psi_rng);
  p.grad = make_head(p.features.size(), hidden, dim, grad_rng);
  p.lambda = lambda_init;
  return p;
}

struct HeadVars {
  std::vector<Var> weights;
  std::vector<Var> biases;
};

/// NetworkParams recorded as leaves of one tape.
struct BoundNetwork {
  FeatureMap features;
  HeadVars psi;
  HeadVars grad;
  Var lambda;

  /// Leaves in NetworkParams::tensors() order.
  std::vector<Var> tensor_vars() const {
    std::vector<Var> out;
    for (const auto* h : {&psi, &grad}) {
      for (std::size_t i = 0; i < h->weights.size(); ++i) {
        out.push_back(h->weights[i]);
        out.push_back(h->biases[i]);
      }
    }
    return out;
  }
};

inline BoundNetwork bind(const NetworkParams& params, Tape& tape, bool trainable = true) {
  BoundNetwork net;
  net.features = params.features;
  auto bind_head = [&](const MlpHead& h, HeadVars& out) {
    for (const auto& l : h.layers) {
      out.weights.push_back(tape.leaf(l.weight, trainable));
      out.biases.push_back(tape.leaf(l.bias, trainable));
    }
  };
  bind_head(params.psi, net.psi);
  bind_head(params.grad, net.grad);
  net.lambda = tape.leaf(Tensor::scalar(params.lambda), trainable);
  return net;
}

inline Var eval_head(const HeadVars& head, Var features) {
  Var h = features;
  for (std::size_t i = 0; i < head.weights.size(); ++i) {
    h = add_bias(matmul(h, head.weights[i]), head.biases[i]);
    if (i + 1 < head.weights.size()) h = relu(h);
  }
  return h;
}

/// Psi head at the rows of x (rows x d); returns rows x 1.
inline Var eval_psi(const BoundNetwork& net, Var x) {
  return eval_head(net.psi, featurize(x, net.features.order));
}

/// Scaled-gradient head at the rows of x; returns rows x d.
inline Var eval_grad_head(const BoundNetwork& net, Var x) {
  return eval_head(net.grad, featurize(x, net.features.order));
}

struct PsiWithGradient {
  Var value;     // rows x 1
  Var gradient;  // rows x d, d psi / d x per row, differentiable w.r.t. parameters
};

/// x must be a leaf of the tape; rows are independent points.
inline PsiWithGradient psi_input_gradient(const BoundNetwork& net, Var x) {
  if (x.tape().node(x.id()).op != OpKind::Leaf) {
    throw std::invalid_argument("psi_input_gradient: x must be a leaf");
  }
  Var value = eval_psi(net, x);
  return {value, input_gradient(sum(value), x)};
}

/// Tape-free helpers for evaluation on plain tensors.
inline Tensor eval_psi(const NetworkParams& params, const Tensor& x) {
  Tape tape;
  auto net = bind(params, tape, false);
  return eval_psi(net, tape.constant(x)).value();
}
inline Tensor eval_grad_head(const NetworkParams& params, const Tensor& x) {
  Tape tape;
  auto net = bind(params, tape, false);
  return eval_grad_head(net, tape.constant(x)).value();
}

}  // namespace fkeig
