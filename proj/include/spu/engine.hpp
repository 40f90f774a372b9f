// SPDX-License-Identifier: Apache-2.0
//
// Graph-level forward and sparse backward. The forward pass stores exactly
// what the memory model charges for the given plan:
//   conv2d (trainable)     full input activation
//   depthwise (trainable)  input activation of the selected channels only
//   linear (trainable)     input activation
//   ReLU on backward path  1-bit keep mask
// Gradient propagation stops at the earliest node whose output depends on a
// trainable parameter.
#pragma once

#include <optional>
#include <stdexcept>

#include "spu/plan.hpp"

namespace spu {

template <typename T>
struct CacheEntry {
  std::optional<Tensor<T>> activation;
  std::optional<Bitset> relu_keep;
  Shape in_shape;  // shape metadata only, not charged
};

template <typename T>
struct ActivationCache {
  std::vector<CacheEntry<T>> entries;
  Shape output_shape;  // shape of the last node's output

  std::size_t activation_bytes() const {
    std::size_t b = 0;
    for (const auto& e : entries)
      if (e.activation) b += e.activation->size() * sizeof(T);
    return b;
  }
  std::size_t mask_bytes() const {
    std::size_t b = 0;
    for (const auto& e : entries)
      if (e.relu_keep) b += e.relu_keep->byte_size();
    return b;
  }
  std::size_t stored_bytes() const { return activation_bytes() + mask_bytes(); }
  bool retained(std::size_t i) const { return entries[i].activation || entries[i].relu_keep; }
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // (N, num_classes)
  ActivationCache<T> cache;
};

template <typename T>
ForwardResult<T> forward(const ModelGraph<T>& model, const Tensor<T>& x, const UpdatePlan& plan,
                         const BlockPruneConfig& act_prune) {
  require(x.rank() == 4 && x.dim(1) == model.input_shape.at(0) && x.dim(2) == model.input_shape.at(1) &&
              x.dim(3) == model.input_shape.at(2),
          "forward: input " + shape_str(x.shape()) + " does not match model input " +
              shape_str(model.input_shape));
  validate_plan(model, plan);
  const auto on_path = backward_path(model, plan);
  ForwardResult<T> res;
  res.cache.entries.resize(model.size());
  std::vector<Tensor<T>> outs(model.size());
  // Number of consumers still to read each output, so it can be released.
  std::vector<int> readers(model.size(), 0);
  for (const auto& n : model.nodes)
    for (int src : n.inputs)
      if (src != kModelInput) ++readers[static_cast<std::size_t>(src)];

  for (std::size_t i = 0; i < model.size(); ++i) {
    const auto& n = model[i];
    auto in = [&](std::size_t k) -> const Tensor<T>& {
      const int src = n.inputs.at(k);
      return src == kModelInput ? x : outs[static_cast<std::size_t>(src)];
    };
    const Tensor<T>& a = in(0);
    auto& entry = res.cache.entries[i];
    entry.in_shape = a.shape();
    const bool train = plan.trainable(static_cast<int>(i));
    switch (n.kind) {
      case LayerKind::Conv2d:
        outs[i] = conv_forward(a, n.weight, std::span<const T>(n.bias), n.stride, n.pad);
        if (train) entry.activation = a;
        break;
      case LayerKind::DepthwiseConv2d:
        outs[i] = depthwise_forward(a, n.weight, std::span<const T>(n.bias), n.stride, n.pad);
        if (train) entry.activation = gather_channels(a, plan.selected(static_cast<int>(i)));
        break;
      case LayerKind::Linear:
        outs[i] = linear_forward(a, n.weight, std::span<const T>(n.bias));
        if (train) entry.activation = a;
        break;
      case LayerKind::ReLU: {
        auto r = relu_block_prune(a, act_prune.block, act_prune.threshold);
        outs[i] = std::move(r.y);
        if (input_on_path(on_path, n.inputs[0])) entry.relu_keep = std::move(r.keep);
        break;
      }
      case LayerKind::GroupNorm:
        outs[i] = groupnorm_forward_frozen(a, std::span<const T>(n.gamma), std::span<const T>(n.beta),
                                           std::span<const T>(n.mean), std::span<const T>(n.var), n.groups,
                                           n.eps);
        break;
      case LayerKind::ResidualAdd: {
        const Tensor<T>& b = in(1);
        require(a.shape() == b.shape(), "forward: residual operands differ in shape");
        outs[i] = a;
        for (std::size_t k = 0; k < b.size(); ++k) outs[i][k] += b[k];
        break;
      }
      case LayerKind::AvgPool: outs[i] = global_avgpool_forward(a); break;
      case LayerKind::Flatten: outs[i] = a.reshaped({a.dim(0), a.size() / a.dim(0)}); break;
    }
    for (int src : n.inputs)
      if (src != kModelInput && --readers[static_cast<std::size_t>(src)] == 0 &&
          static_cast<std::size_t>(src) + 1 != model.size())
        outs[static_cast<std::size_t>(src)] = Tensor<T>();
  }
  Tensor<T>& last = outs.back();
  res.cache.output_shape = last.shape();
  const std::size_t N = x.dim(0);
  res.logits = last.reshaped({N, last.size() / N});
  if (!res.logits.all_finite()) throw std::runtime_error("forward: non-finite model output");
  return res;
}

/// Forward without any retained state.
template <typename T>
Tensor<T> predict(const ModelGraph<T>& model, const Tensor<T>& x, const BlockPruneConfig& act_prune) {
  return forward(model, x, empty_plan(model), act_prune).logits;
}

/// Compact gradient of one trainable layer: weight is (..., |selected|).
template <typename T>
struct ParamGrad {
  int node = 0;
  ChannelSet selected;
  Tensor<T> weight;
  std::vector<T> bias;

  std::size_t bytes() const { return (weight.size() + bias.size()) * sizeof(T); }
};

template <typename T>
struct Gradients {
  std::vector<ParamGrad<T>> params;
  std::size_t workspace_peak_bytes = 0;  // transient grad_in/grad_out buffers

  std::size_t bytes() const {
    std::size_t b = 0;
    for (const auto& p : params) b += p.bytes();
    return b;
  }
  const ParamGrad<T>* find(int node) const {
    for (const auto& p : params)
      if (p.node == node) return &p;
    return nullptr;
  }
};

template <typename T>
Gradients<T> backward(const ModelGraph<T>& model, const ActivationCache<T>& cache, const Tensor<T>& grad_logits,
                      const UpdatePlan& plan) {
  Gradients<T> out;
  if (!plan.any_trainable() || model.size() == 0) return out;
  const auto on_path = backward_path(model, plan);
  const std::size_t last = model.size() - 1;
  std::vector<std::optional<Tensor<T>>> grads(model.size());
  require(on_path[last], "backward: output does not depend on any trainable layer");
  grads[last] = grad_logits.reshaped(cache.output_shape);
  std::size_t live = grads[last]->size() * sizeof(T);
  out.workspace_peak_bytes = live;

  auto accumulate = [&](int src, Tensor<T> g) {
    if (!input_on_path(on_path, src)) return;
    auto& slot = grads[static_cast<std::size_t>(src)];
    if (!slot) {
      live += g.size() * sizeof(T);
      slot = std::move(g);
    } else {
      for (std::size_t k = 0; k < g.size(); ++k) (*slot)[k] += g[k];
    }
    out.workspace_peak_bytes = std::max(out.workspace_peak_bytes, live);
  };

  for (std::size_t ii = model.size(); ii-- > 0;) {
    if (!grads[ii]) continue;
    const auto& n = model[ii];
    const auto& entry = cache.entries[ii];
    const Tensor<T>& g = *grads[ii];
    const int id = static_cast<int>(ii);
    const bool train = plan.trainable(id);
    const bool need_in = input_on_path(on_path, n.inputs[0]);
    const WeightMask* mask = n.mask.empty() ? nullptr : &n.mask;
    switch (n.kind) {
      case LayerKind::Conv2d:
        if (train) {
          if (!entry.activation) throw std::logic_error("backward: missing saved activation for conv node " + std::to_string(ii));
          const auto& sel = plan.selected(id);
          ParamGrad<T> pg{id, sel,
                          conv_weight_grad(*entry.activation, g, n.weight.dim(0), n.weight.dim(1), sel, n.stride,
                                           n.pad, mask),
                          {}};
          if (!n.bias.empty()) pg.bias = channel_bias_grad(g, sel);
          out.params.push_back(std::move(pg));
        }
        if (need_in) accumulate(n.inputs[0], conv_input_grad(g, n.weight, entry.in_shape, n.stride, n.pad));
        break;
      case LayerKind::DepthwiseConv2d:
        if (train) {
          if (!entry.activation) throw std::logic_error("backward: missing saved activation for depthwise node " + std::to_string(ii));
          const auto& sel = plan.selected(id);
          ParamGrad<T> pg{id, sel,
                          depthwise_weight_grad(*entry.activation, g, n.weight.dim(0), n.weight.dim(1), sel,
                                                n.stride, n.pad, mask),
                          {}};
          if (!n.bias.empty()) pg.bias = channel_bias_grad(g, sel);
          out.params.push_back(std::move(pg));
        }
        if (need_in) accumulate(n.inputs[0], depthwise_input_grad(g, n.weight, entry.in_shape, n.stride, n.pad));
        break;
      case LayerKind::Linear:
        if (train) {
          if (!entry.activation) throw std::logic_error("backward: missing saved activation for linear node " + std::to_string(ii));
          const auto& sel = plan.selected(id);
          ParamGrad<T> pg{id, sel, linear_weight_grad(*entry.activation, g, sel, mask), {}};
          if (!n.bias.empty()) pg.bias = channel_bias_grad(g, sel);
          out.params.push_back(std::move(pg));
        }
        if (need_in) accumulate(n.inputs[0], linear_input_grad(g, n.weight));
        break;
      case LayerKind::ReLU:
        if (need_in) {
          if (!entry.relu_keep) throw std::logic_error("backward: missing ReLU mask for node " + std::to_string(ii));
          accumulate(n.inputs[0], relu_block_backward(g, *entry.relu_keep));
        }
        break;
      case LayerKind::GroupNorm:
        if (need_in)
          accumulate(n.inputs[0],
                     groupnorm_backward_frozen(g, std::span<const T>(n.gamma), std::span<const T>(n.var), n.eps));
        break;
      case LayerKind::ResidualAdd:
        if (need_in) accumulate(n.inputs[0], g);
        if (input_on_path(on_path, n.inputs[1])) accumulate(n.inputs[1], g);
        break;
      case LayerKind::AvgPool:
        if (need_in) accumulate(n.inputs[0], global_avgpool_backward(g, entry.in_shape));
        break;
      case LayerKind::Flatten:
        if (need_in) accumulate(n.inputs[0], g.reshaped(entry.in_shape));
        break;
    }
    live -= grads[ii]->size() * sizeof(T);
    grads[ii].reset();
  }
  // Parameter gradients in topological order.
  std::sort(out.params.begin(), out.params.end(), [](const auto& a, const auto& b) { return a.node < b.node; });
  return out;
}

}  // namespace spu
