// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "spu/layers.hpp"

namespace spu {

enum class LayerKind : std::uint32_t {
  Conv2d = 1,
  DepthwiseConv2d = 2,
  Linear = 3,
  ReLU = 4,
  GroupNorm = 5,
  ResidualAdd = 6,
  AvgPool = 7,  // global average pool -> (N, 1, 1, C)
  Flatten = 8,
};

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::DepthwiseConv2d: return "dwconv2d";
    case LayerKind::Linear: return "linear";
    case LayerKind::ReLU: return "relu";
    case LayerKind::GroupNorm: return "groupnorm";
    case LayerKind::ResidualAdd: return "add";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::Flatten: return "flatten";
  }
  return "unknown";
}

inline bool has_weights(LayerKind k) {
  return k == LayerKind::Conv2d || k == LayerKind::DepthwiseConv2d || k == LayerKind::Linear;
}

/// Id used in `inputs` to refer to the model input tensor.
inline constexpr int kModelInput = -1;

template <typename T>
struct LayerNode {
  int id = 0;
  LayerKind kind = LayerKind::ReLU;
  std::string name;
  std::vector<int> inputs;

  // Conv2d: (kh, kw, Cin, Cout); DepthwiseConv2d: (kh, kw, C); Linear: (Cin, Cout).
  Tensor<T> weight;
  std::vector<T> bias;  // empty when the layer has no bias
  WeightMask mask;      // empty = dense; otherwise congruent to weight
  int stride = 1;
  int pad = 0;

  // Frozen GroupNorm. mean/var are stored per channel.
  std::vector<T> gamma, beta, mean, var;
  int groups = 1;
  T eps = T(1e-5);

  std::size_t out_channels() const {
    switch (kind) {
      case LayerKind::Conv2d: return weight.dim(3);
      case LayerKind::DepthwiseConv2d: return weight.dim(2);
      case LayerKind::Linear: return weight.dim(1);
      case LayerKind::GroupNorm: return gamma.size();
      default: return 0;
    }
  }
  std::size_t in_channels() const {
    switch (kind) {
      case LayerKind::Conv2d: return weight.dim(2);
      case LayerKind::DepthwiseConv2d: return weight.dim(2);
      case LayerKind::Linear: return weight.dim(0);
      case LayerKind::GroupNorm: return gamma.size();
      default: return 0;
    }
  }
  std::size_t kernel_h() const { return kind == LayerKind::Linear ? 1 : weight.dim(0); }
  std::size_t kernel_w() const { return kind == LayerKind::Linear ? 1 : weight.dim(1); }

  bool masked(std::size_t i) const { return !mask.empty() && !mask[i]; }

  /// Enforce w == 0 wherever mask == 0.
  void apply_mask() {
    if (mask.empty()) return;
    for (std::size_t i = 0; i < weight.size(); ++i)
      if (!mask[i]) weight[i] = T{0};
  }

  /// Trainable + buffer parameter count (kernel, bias, gamma, beta).
  std::size_t param_count() const {
    return weight.size() + bias.size() + gamma.size() + beta.size();
  }
};

template <typename T>
struct ModelGraph {
  std::vector<LayerNode<T>> nodes;
  Shape input_shape;  // (H, W, C)
  int num_classes = 0;

  std::size_t size() const { return nodes.size(); }
  const LayerNode<T>& operator[](std::size_t i) const { return nodes[i]; }
  LayerNode<T>& operator[](std::size_t i) { return nodes[i]; }

  /// Index of the classifier: the last Linear node, or -1.
  int classifier_id() const {
    for (int i = static_cast<int>(nodes.size()) - 1; i >= 0; --i)
      if (nodes[static_cast<std::size_t>(i)].kind == LayerKind::Linear) return i;
    return -1;
  }

  /// Weight-carrying layers other than the classifier, in topological order.
  std::vector<int> backbone_layers() const {
    std::vector<int> ids;
    const int cls = classifier_id();
    for (const auto& n : nodes)
      if (has_weights(n.kind) && n.id != cls) ids.push_back(n.id);
    return ids;
  }

  std::size_t param_count() const {
    std::size_t c = 0;
    for (const auto& n : nodes) c += n.param_count();
    return c;
  }

  /// Output shape of every node for a given batch size. Throws on any
  /// inconsistency.
  std::vector<Shape> infer_shapes(std::size_t batch = 1) const {
    require(input_shape.size() == 3, "model input shape must be (H, W, C)");
    std::vector<Shape> out(nodes.size());
    const Shape in{batch, input_shape[0], input_shape[1], input_shape[2]};
    auto input_of = [&](const LayerNode<T>& n, std::size_t k) -> const Shape& {
      const int src = n.inputs.at(k);
      return src == kModelInput ? in : out[static_cast<std::size_t>(src)];
    };
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const auto& n = nodes[i];
      const std::string where = "node " + std::to_string(i) + " (" + kind_name(n.kind) + "): ";
      require(n.id == static_cast<int>(i), where + "id does not match position");
      require(!n.inputs.empty(), where + "no inputs");
      for (int src : n.inputs)
        require(src == kModelInput || (src >= 0 && src < static_cast<int>(i)),
                where + "input " + std::to_string(src) + " is not an earlier node");
      const Shape& s = input_of(n, 0);
      switch (n.kind) {
        case LayerKind::Conv2d: {
          require(s.size() == 4 && n.weight.rank() == 4 && s[3] == n.weight.dim(2),
                  where + "input " + shape_str(s) + " incompatible with kernel " + shape_str(n.weight.shape()));
          out[i] = {s[0], conv_out_extent(s[1], n.weight.dim(0), n.stride, n.pad),
                    conv_out_extent(s[2], n.weight.dim(1), n.stride, n.pad), n.weight.dim(3)};
          break;
        }
        case LayerKind::DepthwiseConv2d: {
          require(s.size() == 4 && n.weight.rank() == 3 && s[3] == n.weight.dim(2),
                  where + "input " + shape_str(s) + " incompatible with kernel " + shape_str(n.weight.shape()));
          out[i] = {s[0], conv_out_extent(s[1], n.weight.dim(0), n.stride, n.pad),
                    conv_out_extent(s[2], n.weight.dim(1), n.stride, n.pad), n.weight.dim(2)};
          break;
        }
        case LayerKind::Linear:
          require(s.size() == 2 && n.weight.rank() == 2 && s[1] == n.weight.dim(0),
                  where + "input " + shape_str(s) + " incompatible with weight " + shape_str(n.weight.shape()));
          out[i] = {s[0], n.weight.dim(1)};
          break;
        case LayerKind::GroupNorm:
          require(s.back() == n.gamma.size(), where + "channel count mismatch");
          require(n.groups >= 1 && n.gamma.size() % static_cast<std::size_t>(n.groups) == 0,
                  where + "channels not divisible by groups");
          out[i] = s;
          break;
        case LayerKind::ReLU: out[i] = s; break;
        case LayerKind::ResidualAdd:
          require(n.inputs.size() == 2, where + "needs two inputs");
          require(input_of(n, 1) == s, where + "operand shapes differ: " + shape_str(s) + " vs " +
                                           shape_str(input_of(n, 1)));
          out[i] = s;
          break;
        case LayerKind::AvgPool:
          require(s.size() == 4, where + "expects NHWC input");
          out[i] = {s[0], 1, 1, s[3]};
          break;
        case LayerKind::Flatten: out[i] = {s[0], shape_numel(s) / s[0]}; break;
      }
      if (has_weights(n.kind)) {
        require(n.bias.empty() || n.bias.size() == n.out_channels(), where + "bias length mismatch");
        require(n.mask.empty() || n.mask.size() == n.weight.size(), where + "mask not congruent to weight");
      }
    }
    if (!nodes.empty() && num_classes > 0)
      require(shape_numel(out.back()) == batch * static_cast<std::size_t>(num_classes),
              "model output " + shape_str(out.back()) + " does not match num_classes");
    return out;
  }

  /// Input shapes per node (first operand).
  std::vector<Shape> infer_input_shapes(std::size_t batch = 1) const {
    auto outs = infer_shapes(batch);
    const Shape in{batch, input_shape[0], input_shape[1], input_shape[2]};
    std::vector<Shape> ins(nodes.size());
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const int src = nodes[i].inputs.at(0);
      ins[i] = src == kModelInput ? in : outs[static_cast<std::size_t>(src)];
    }
    return ins;
  }

  template <typename U>
  ModelGraph<U> cast() const {
    ModelGraph<U> m;
    m.input_shape = input_shape;
    m.num_classes = num_classes;
    auto conv = [](const std::vector<T>& v) { return std::vector<U>(v.begin(), v.end()); };
    for (const auto& n : nodes) {
      LayerNode<U> c;
      c.id = n.id;
      c.kind = n.kind;
      c.name = n.name;
      c.inputs = n.inputs;
      c.weight = n.weight.template cast<U>();
      c.bias = conv(n.bias);
      c.mask = n.mask;
      c.stride = n.stride;
      c.pad = n.pad;
      c.gamma = conv(n.gamma);
      c.beta = conv(n.beta);
      c.mean = conv(n.mean);
      c.var = conv(n.var);
      c.groups = n.groups;
      c.eps = static_cast<U>(n.eps);
      m.nodes.push_back(std::move(c));
    }
    return m;
  }
};

}  // namespace spu
