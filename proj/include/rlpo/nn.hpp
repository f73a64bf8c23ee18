#pragma once

// Dense multilayer perceptrons with hand-written backward passes, low-rank
// adapters and first-order optimizers. Everything is templated on the scalar
// type; the engine instantiates it with double.
//
// Batches are column-major: an input matrix of shape (d_in, n) holds n samples.

#include "rlpo/types.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

namespace rlpo::nn {

enum class Activation { relu, identity };

template <typename Scalar>
struct DenseLayer {
  MatrixX<Scalar> weight;  // d_out x d_in
  VectorX<Scalar> bias;    // d_out
  Activation activation = Activation::relu;

  Eigen::Index in_dim() const { return weight.cols(); }
  Eigen::Index out_dim() const { return weight.rows(); }
};

template <typename Scalar>
struct Mlp {
  std::vector<DenseLayer<Scalar>> layers;

  std::size_t depth() const { return layers.size(); }
  Eigen::Index input_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  Eigen::Index output_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }

  // Throws ShapeError / NumericError when the invariants do not hold.
  void validate() const {
    if (layers.empty()) throw ShapeError("mlp has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.bias.size() != l.out_dim())
        throw ShapeError("layer " + std::to_string(i) + ": bias length does not match weight rows");
      if (i > 0 && l.in_dim() != layers[i - 1].out_dim())
        throw ShapeError("layer " + std::to_string(i) + ": input dimension does not match previous layer");
      if (!l.weight.allFinite() || !l.bias.allFinite())
        throw NumericError("layer " + std::to_string(i) + ": non-finite parameter");
    }
  }
};

// Effective weight of a targeted layer is W + scale * a * b.
template <typename Scalar>
struct LoraAdapter {
  MatrixX<Scalar> a;  // d_out x r
  MatrixX<Scalar> b;  // r x d_in
  Scalar scale = Scalar(1);

  Eigen::Index rank() const { return a.cols(); }
  MatrixX<Scalar> delta() const { return scale * a * b; }
};

template <typename Scalar>
using AdapterMap = std::map<std::size_t, LoraAdapter<Scalar>>;

template <typename Scalar>
void validate_adapters(const Mlp<Scalar>& net, const AdapterMap<Scalar>& adapters) {
  for (const auto& [idx, ad] : adapters) {
    if (idx >= net.depth()) throw ShapeError("adapter targets missing layer " + std::to_string(idx));
    const auto& l = net.layers[idx];
    const auto r = ad.rank();
    if (r < 1 || r > std::min(l.out_dim(), l.in_dim()))
      throw ShapeError("adapter on layer " + std::to_string(idx) + ": rank out of range");
    if (ad.a.rows() != l.out_dim() || ad.b.rows() != r || ad.b.cols() != l.in_dim())
      throw ShapeError("adapter on layer " + std::to_string(idx) + ": shape does not match layer");
  }
}

template <typename Scalar>
struct ForwardTrace {
  std::size_t first_layer = 0;
  MatrixX<Scalar> input;               // input to first_layer
  std::vector<MatrixX<Scalar>> pre;    // indexed by absolute layer; empty below first_layer
  std::vector<MatrixX<Scalar>> post;

  const MatrixX<Scalar>& output() const { return post.back(); }
  const MatrixX<Scalar>& input_of(std::size_t layer) const {
    return layer == first_layer ? input : post[layer - 1];
  }
};

// Runs layers [first_layer, depth) on x. With adapters, layer i uses
// W_i + scale * a_i * b_i.
template <typename Scalar>
ForwardTrace<Scalar> forward(const Mlp<Scalar>& net, const std::type_identity_t<MatrixX<Scalar>>& x,
                             const std::type_identity_t<AdapterMap<Scalar>>* adapters = nullptr,
                             std::size_t first_layer = 0) {
  if (first_layer >= net.depth()) throw ShapeError("forward: first layer index out of range");
  if (x.rows() != net.layers[first_layer].in_dim())
    throw ShapeError("layer " + std::to_string(first_layer) + ": input has " + std::to_string(x.rows()) +
                     " rows, expected " + std::to_string(net.layers[first_layer].in_dim()));
  ForwardTrace<Scalar> trace;
  trace.first_layer = first_layer;
  trace.input = x;
  trace.pre.resize(net.depth());
  trace.post.resize(net.depth());
  for (std::size_t i = first_layer; i < net.depth(); ++i) {
    const auto& layer = net.layers[i];
    const MatrixX<Scalar>& in = trace.input_of(i);
    MatrixX<Scalar> z = layer.weight * in;
    z.colwise() += layer.bias;
    if (adapters) {
      if (auto it = adapters->find(i); it != adapters->end()) {
        const auto& ad = it->second;
        if (ad.a.rows() != layer.out_dim() || ad.b.cols() != layer.in_dim())
          throw ShapeError("adapter on layer " + std::to_string(i) + ": shape does not match layer");
        z.noalias() += ad.scale * (ad.a * (ad.b * in));
      }
    }
    trace.post[i] = layer.activation == Activation::relu ? MatrixX<Scalar>(z.cwiseMax(Scalar(0))) : z;
    trace.pre[i] = std::move(z);
  }
  return trace;
}

template <typename Scalar>
VectorX<Scalar> forward_vector(const Mlp<Scalar>& net, const std::type_identity_t<VectorX<Scalar>>& x,
                               const std::type_identity_t<AdapterMap<Scalar>>* adapters = nullptr) {
  return forward(net, MatrixX<Scalar>(x), adapters).output().col(0);
}

enum class GradTarget { all_params, adapters_only, input_only };

struct GradRequest {
  bool params = false;
  bool adapters = false;
  bool input = false;

  static GradRequest of(GradTarget t) {
    switch (t) {
      case GradTarget::all_params: return {true, true, false};
      case GradTarget::adapters_only: return {false, true, false};
      case GradTarget::input_only: return {false, false, true};
    }
    return {};
  }
};

template <typename Scalar>
struct LayerGrad {
  MatrixX<Scalar> weight;
  VectorX<Scalar> bias;
};

template <typename Scalar>
struct AdapterGrad {
  MatrixX<Scalar> a;
  MatrixX<Scalar> b;
};

template <typename Scalar>
struct Gradients {
  std::vector<LayerGrad<Scalar>> layers;  // empty unless parameters were requested
  std::map<std::size_t, AdapterGrad<Scalar>> adapters;
  MatrixX<Scalar> input;  // d_in x n, empty unless requested
};

// Vector-Jacobian product of the traced forward pass with `upstream`
// (d_out x n). Parameter gradients are summed over the batch.
template <typename Scalar>
Gradients<Scalar> backward(const Mlp<Scalar>& net, const std::type_identity_t<AdapterMap<Scalar>>* adapters,
                           const ForwardTrace<Scalar>& trace, const std::type_identity_t<MatrixX<Scalar>>& upstream,
                           GradRequest request) {
  if (trace.post.size() != net.depth() || trace.post.back().size() == 0)
    throw Error("backward: missing forward trace");
  const auto& out = trace.output();
  if (upstream.rows() != out.rows() || upstream.cols() != out.cols())
    throw ShapeError("backward: upstream gradient shape does not match network output");

  const std::size_t first = trace.first_layer;
  // Lowest layer the backward sweep must reach.
  std::size_t lowest = net.depth() - 1;
  if (request.params || request.input) lowest = first;
  if (request.adapters && adapters) {
    for (const auto& [idx, ad] : *adapters)
      if (idx >= first) lowest = std::min(lowest, idx);
  }

  Gradients<Scalar> grads;
  if (request.params) {
    grads.layers.resize(net.depth());
    for (std::size_t i = 0; i < net.depth(); ++i) {
      grads.layers[i].weight = MatrixX<Scalar>::Zero(net.layers[i].out_dim(), net.layers[i].in_dim());
      grads.layers[i].bias = VectorX<Scalar>::Zero(net.layers[i].out_dim());
    }
  }

  MatrixX<Scalar> g = upstream;
  for (std::size_t i = net.depth(); i-- > lowest;) {
    const auto& layer = net.layers[i];
    if (layer.activation == Activation::relu)
      g = g.cwiseProduct((trace.pre[i].array() > Scalar(0)).template cast<Scalar>().matrix());
    const MatrixX<Scalar>& in = trace.input_of(i);
    if (request.params) {
      grads.layers[i].weight.noalias() = g * in.transpose();
      grads.layers[i].bias = g.rowwise().sum();
    }
    const LoraAdapter<Scalar>* ad = nullptr;
    if (adapters) {
      if (auto it = adapters->find(i); it != adapters->end()) ad = &it->second;
    }
    MatrixX<Scalar> at_g;  // a^T g, shared by the b-gradient and the input propagation
    if (ad) at_g.noalias() = ad->a.transpose() * g;
    if (ad && request.adapters) {
      AdapterGrad<Scalar> ag;
      ag.a.noalias() = ad->scale * (g * (ad->b * in).transpose());
      ag.b.noalias() = ad->scale * (at_g * in.transpose());
      grads.adapters[i] = std::move(ag);
    }
    if (i == lowest && !(request.input && i == first)) break;
    MatrixX<Scalar> below = layer.weight.transpose() * g;
    if (ad) below.noalias() += ad->scale * (ad->b.transpose() * at_g);
    g = std::move(below);
    if (i == first) {
      if (request.input) grads.input = g;
      break;
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Initialization

template <typename Scalar, typename Rng>
Mlp<Scalar> make_mlp(const std::vector<Eigen::Index>& dims, Activation hidden, Activation output, Rng& rng) {
  if (dims.size() < 2) throw ShapeError("make_mlp: need at least input and output dimension");
  Mlp<Scalar> net;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    DenseLayer<Scalar> layer;
    const auto fan_in = dims[i];
    const Scalar std_dev = std::sqrt(Scalar(2) / static_cast<Scalar>(fan_in));
    std::normal_distribution<Scalar> dist(Scalar(0), std_dev);
    layer.weight = MatrixX<Scalar>::NullaryExpr(dims[i + 1], dims[i], [&] { return dist(rng); });
    layer.bias = VectorX<Scalar>::Zero(dims[i + 1]);
    layer.activation = (i + 2 == dims.size()) ? output : hidden;
    net.layers.push_back(std::move(layer));
  }
  return net;
}

// a ~ N(0, init_std^2), b = 0: the adapter starts as an exact no-op.
template <typename Scalar, typename Rng>
LoraAdapter<Scalar> make_adapter(Eigen::Index d_out, Eigen::Index d_in, Eigen::Index rank, Scalar scale, Rng& rng,
                                 Scalar init_std = Scalar(0.02)) {
  if (rank < 1 || rank > std::min(d_out, d_in)) throw ShapeError("make_adapter: rank out of range");
  std::normal_distribution<Scalar> dist(Scalar(0), init_std);
  LoraAdapter<Scalar> ad;
  ad.a = MatrixX<Scalar>::NullaryExpr(d_out, rank, [&] { return dist(rng); });
  ad.b = MatrixX<Scalar>::Zero(rank, d_in);
  ad.scale = scale;
  return ad;
}

// ---------------------------------------------------------------------------
// Flat parameter views, used by the optimizers and the checkpoint code.

template <typename Scalar>
using FlatView = Eigen::Map<VectorX<Scalar>>;
template <typename Scalar>
using ConstFlatView = Eigen::Map<const VectorX<Scalar>>;

template <typename Derived>
auto flat(Eigen::PlainObjectBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  return FlatView<Scalar>(m.data(), m.size());
}
template <typename Derived>
auto flat(const Eigen::PlainObjectBase<Derived>& m) {
  using Scalar = typename Derived::Scalar;
  return ConstFlatView<Scalar>(m.data(), m.size());
}

template <typename Scalar>
std::vector<FlatView<Scalar>> parameter_views(Mlp<Scalar>& net) {
  std::vector<FlatView<Scalar>> views;
  for (auto& l : net.layers) {
    views.push_back(flat(l.weight));
    views.push_back(flat(l.bias));
  }
  return views;
}

template <typename Scalar>
std::vector<FlatView<Scalar>> parameter_views(AdapterMap<Scalar>& adapters) {
  std::vector<FlatView<Scalar>> views;
  for (auto& [idx, ad] : adapters) {
    views.push_back(flat(ad.a));
    views.push_back(flat(ad.b));
  }
  return views;
}

template <typename Scalar>
std::vector<ConstFlatView<Scalar>> param_gradient_views(const Gradients<Scalar>& g) {
  std::vector<ConstFlatView<Scalar>> views;
  for (const auto& l : g.layers) {
    views.push_back(flat(l.weight));
    views.push_back(flat(l.bias));
  }
  return views;
}

template <typename Scalar>
std::vector<ConstFlatView<Scalar>> adapter_gradient_views(const Gradients<Scalar>& g) {
  std::vector<ConstFlatView<Scalar>> views;
  for (const auto& [idx, ag] : g.adapters) {
    views.push_back(flat(ag.a));
    views.push_back(flat(ag.b));
  }
  return views;
}

// ---------------------------------------------------------------------------
// Optimizers

enum class Algorithm { sgd, adam };

struct OptimizerConfig {
  Algorithm algorithm = Algorithm::adam;
  double learning_rate = 1e-3;
  double clip_norm = std::numeric_limits<double>::infinity();  // global L2 norm
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename Scalar>
struct OptimizerState {
  std::vector<VectorX<Scalar>> m;
  std::vector<VectorX<Scalar>> v;
  std::int64_t step = 0;
};

struct StepReport {
  double grad_norm = 0;     // before clipping
  double applied_norm = 0;  // after clipping
};

template <typename Scalar>
StepReport optimizer_step(std::vector<FlatView<Scalar>> params, const std::vector<ConstFlatView<Scalar>>& grads,
                          OptimizerState<Scalar>& state, const OptimizerConfig& config) {
  if (params.size() != grads.size()) throw ShapeError("optimizer: parameter/gradient block count mismatch");
  Scalar sq = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size())
      throw ShapeError("optimizer: gradient block " + std::to_string(i) + " has wrong size");
    if (!grads[i].allFinite()) throw NumericError("optimizer: non-finite gradient in block " + std::to_string(i));
    sq += grads[i].squaredNorm();
  }
  StepReport report;
  report.grad_norm = std::sqrt(static_cast<double>(sq));
  Scalar factor = 1;
  if (report.grad_norm > config.clip_norm) factor = static_cast<Scalar>(config.clip_norm / report.grad_norm);
  report.applied_norm = report.grad_norm * static_cast<double>(factor);
  const auto lr = static_cast<Scalar>(config.learning_rate);

  if (config.algorithm == Algorithm::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * (factor * grads[i]);
    ++state.step;
    return report;
  }

  if (state.m.size() != params.size()) {
    if (!state.m.empty()) throw ShapeError("optimizer: state does not match parameters");
    for (const auto& p : params) {
      state.m.push_back(VectorX<Scalar>::Zero(p.size()));
      state.v.push_back(VectorX<Scalar>::Zero(p.size()));
    }
  }
  ++state.step;
  const auto b1 = static_cast<Scalar>(config.beta1);
  const auto b2 = static_cast<Scalar>(config.beta2);
  const auto eps = static_cast<Scalar>(config.epsilon);
  const Scalar c1 = Scalar(1) - std::pow(b1, static_cast<Scalar>(state.step));
  const Scalar c2 = Scalar(1) - std::pow(b2, static_cast<Scalar>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const VectorX<Scalar> g = factor * grads[i];
    state.m[i] = b1 * state.m[i] + (Scalar(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (Scalar(1) - b2) * g.cwiseAbs2();
    params[i].array() -= lr * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + eps);
  }
  return report;
}

template <typename Scalar>
StepReport optimizer_step(Mlp<Scalar>& net, const Gradients<Scalar>& grads, OptimizerState<Scalar>& state,
                          const OptimizerConfig& config) {
  return optimizer_step(parameter_views(net), param_gradient_views(grads), state, config);
}

template <typename Scalar>
StepReport optimizer_step(AdapterMap<Scalar>& adapters, const Gradients<Scalar>& grads,
                          OptimizerState<Scalar>& state, const OptimizerConfig& config) {
  if (grads.adapters.size() != adapters.size()) throw ShapeError("optimizer: adapter gradients missing");
  return optimizer_step(parameter_views(adapters), adapter_gradient_views(grads), state, config);
}

// theta' <- tau * theta + (1 - tau) * theta'. tau == 1 copies exactly.
template <typename Scalar>
void soft_update(Mlp<Scalar>& target, const Mlp<Scalar>& online, Scalar tau) {
  if (target.depth() != online.depth()) throw ShapeError("soft_update: architectures differ");
  for (std::size_t i = 0; i < online.depth(); ++i) {
    auto& t = target.layers[i];
    const auto& o = online.layers[i];
    if (t.weight.rows() != o.weight.rows() || t.weight.cols() != o.weight.cols())
      throw ShapeError("soft_update: layer " + std::to_string(i) + " shape differs");
    if (tau == Scalar(1)) {
      t.weight = o.weight;
      t.bias = o.bias;
    } else if (tau != Scalar(0)) {
      t.weight = tau * o.weight + (Scalar(1) - tau) * t.weight;
      t.bias = tau * o.bias + (Scalar(1) - tau) * t.bias;
    }
  }
}

}  // namespace rlpo::nn
