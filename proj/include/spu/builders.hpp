// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <numeric>
#include <string>

#include "spu/engine.hpp"
#include "spu/random.hpp"

namespace spu {

/// GroupNorm group count used throughout: gcd(C, 8).
inline int default_gn_groups(std::size_t channels) {
  return static_cast<int>(std::gcd(channels, std::size_t{8}));
}

/// Appends nodes to a ModelGraph; each add_* returns the new node id.
template <typename T>
class ModelBuilder {
 public:
  ModelBuilder(Shape input_shape, std::uint64_t seed) : rng_(seed) { model_.input_shape = std::move(input_shape); }

  int add_conv(int input, std::size_t cin, std::size_t cout, std::size_t k, int stride, int pad, bool bias,
               std::string name = {}) {
    auto& n = push(LayerKind::Conv2d, {input}, std::move(name));
    n.weight = he_init({k, k, cin, cout}, k * k * cin);
    if (bias) n.bias.assign(cout, T{0});
    n.stride = stride;
    n.pad = pad;
    return n.id;
  }
  int add_depthwise(int input, std::size_t c, std::size_t k, int stride, int pad, bool bias,
                    std::string name = {}) {
    auto& n = push(LayerKind::DepthwiseConv2d, {input}, std::move(name));
    n.weight = he_init({k, k, c}, k * k);
    if (bias) n.bias.assign(c, T{0});
    n.stride = stride;
    n.pad = pad;
    return n.id;
  }
  int add_linear(int input, std::size_t cin, std::size_t cout, bool bias = true, std::string name = {}) {
    auto& n = push(LayerKind::Linear, {input}, std::move(name));
    n.weight = he_init({cin, cout}, cin);
    if (bias) n.bias.assign(cout, T{0});
    return n.id;
  }
  int add_groupnorm(int input, std::size_t c, std::string name = {}) {
    auto& n = push(LayerKind::GroupNorm, {input}, std::move(name));
    n.gamma.assign(c, T{1});
    n.beta.assign(c, T{0});
    n.mean.assign(c, T{0});
    n.var.assign(c, T{1});
    n.groups = default_gn_groups(c);
    return n.id;
  }
  int add_relu(int input, std::string name = {}) { return push(LayerKind::ReLU, {input}, std::move(name)).id; }
  int add_residual(int a, int b, std::string name = {}) {
    return push(LayerKind::ResidualAdd, {a, b}, std::move(name)).id;
  }
  int add_avgpool(int input) { return push(LayerKind::AvgPool, {input}, {}).id; }
  int add_flatten(int input) { return push(LayerKind::Flatten, {input}, {}).id; }

  /// conv -> GN -> (ReLU)
  int conv_gn(int input, std::size_t cin, std::size_t cout, std::size_t k, int stride, bool relu,
              const std::string& name) {
    int id = add_conv(input, cin, cout, k, stride, static_cast<int>(k / 2), false, name);
    id = add_groupnorm(id, cout, name + ".gn");
    return relu ? add_relu(id, name + ".relu") : id;
  }
  int dw_gn(int input, std::size_t c, int stride, const std::string& name) {
    int id = add_depthwise(input, c, 3, stride, 1, false, name);
    id = add_groupnorm(id, c, name + ".gn");
    return add_relu(id, name + ".relu");
  }

  ModelGraph<T> build(int num_classes) && {
    model_.num_classes = num_classes;
    model_.infer_shapes(1);
    return std::move(model_);
  }

  Rng& rng() { return rng_; }

 private:
  LayerNode<T>& push(LayerKind kind, std::vector<int> inputs, std::string name) {
    LayerNode<T> n;
    n.id = static_cast<int>(model_.nodes.size());
    n.kind = kind;
    n.inputs = std::move(inputs);
    n.name = name.empty() ? std::string(kind_name(kind)) + std::to_string(n.id) : std::move(name);
    model_.nodes.push_back(std::move(n));
    return model_.nodes.back();
  }
  Tensor<T> he_init(Shape s, std::size_t fan_in) {
    Tensor<T> w(std::move(s));
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : w.vec()) v = static_cast<T>(rng_.normal() * sd);
    return w;
  }

  ModelGraph<T> model_;
  Rng rng_;
};

/// Plain CNN: 3x3 conv-GN-ReLU stages (stride 2 wherever `strides` says so),
/// global average pool, linear classifier.
template <typename T>
ModelGraph<T> make_toy_cnn(std::size_t image, std::size_t in_channels, const std::vector<std::size_t>& widths,
                           const std::vector<int>& strides, int num_classes, std::uint64_t seed) {
  require(widths.size() == strides.size(), "toy cnn: widths and strides differ in length");
  ModelBuilder<T> b({image, image, in_channels}, seed);
  int x = kModelInput;
  std::size_t c = in_channels;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    x = b.conv_gn(x, c, widths[i], 3, strides[i], true, "conv" + std::to_string(i));
    c = widths[i];
  }
  x = b.add_avgpool(x);
  x = b.add_flatten(x);
  b.add_linear(x, c, static_cast<std::size_t>(num_classes), true, "classifier");
  return std::move(b).build(num_classes);
}

/// MobileNetV2-style inverted residual: [1x1 expand] -> 3x3 depthwise -> 1x1
/// project, with a skip add when stride is 1 and widths match.
template <typename T>
int inverted_residual(ModelBuilder<T>& b, int x, std::size_t cin, std::size_t cout, int stride, std::size_t expand,
                      const std::string& name) {
  const std::size_t hidden = cin * expand;
  int y = x;
  if (expand != 1) y = b.conv_gn(y, cin, hidden, 1, 1, true, name + ".expand");
  y = b.dw_gn(y, hidden, stride, name + ".dw");
  y = b.conv_gn(y, hidden, cout, 1, 1, false, name + ".project");
  if (stride == 1 && cin == cout) y = b.add_residual(x, y, name + ".add");
  return y;
}

/// MobileNetV2 (width 1.0 gives the standard 52 conv layers) with GroupNorm
/// in place of BatchNorm and ReLU in place of ReLU6.
template <typename T>
ModelGraph<T> make_mobilenet_v2(std::size_t image, int num_classes, std::uint64_t seed, double width = 1.0) {
  struct Stage { std::size_t t, c, n; int s; };
  const Stage stages[] = {{1, 16, 1, 1}, {6, 24, 2, 2}, {6, 32, 3, 2}, {6, 64, 4, 2},
                          {6, 96, 3, 1}, {6, 160, 3, 2}, {6, 320, 1, 1}};
  auto scaled = [&](std::size_t c) {
    if (width == 1.0) return c;
    const auto v = static_cast<std::size_t>(static_cast<double>(c) * width + 4.0) / 8 * 8;
    return std::max<std::size_t>(8, v);
  };
  ModelBuilder<T> b({image, image, 3}, seed);
  std::size_t c = scaled(32);
  int x = b.conv_gn(kModelInput, 3, c, 3, 2, true, "stem");
  int block = 0;
  for (const auto& st : stages)
    for (std::size_t i = 0; i < st.n; ++i) {
      const std::size_t co = scaled(st.c);
      x = inverted_residual(b, x, c, co, i == 0 ? st.s : 1, st.t, "block" + std::to_string(++block));
      c = co;
    }
  const std::size_t last = width > 1.0 ? scaled(1280) : 1280;
  x = b.conv_gn(x, c, last, 1, 1, true, "head");
  x = b.add_avgpool(x);
  x = b.add_flatten(x);
  b.add_linear(x, last, static_cast<std::size_t>(num_classes), true, "classifier");
  return std::move(b).build(num_classes);
}

/// Sets every GroupNorm's frozen statistics from a calibration batch, in
/// topological order, so later layers see already-normalized inputs.
template <typename T>
void calibrate_groupnorm(ModelGraph<T>& model, const Tensor<T>& batch, const BlockPruneConfig& act_prune) {
  for (std::size_t g = 0; g < model.size(); ++g) {
    auto& gn = model[g];
    if (gn.kind != LayerKind::GroupNorm) continue;
    const int src = gn.inputs[0];
    Tensor<T> a;
    if (src == kModelInput) {
      a = batch;
    } else {
      ModelGraph<T> prefix;
      prefix.input_shape = model.input_shape;
      prefix.num_classes = 0;
      prefix.nodes.assign(model.nodes.begin(), model.nodes.begin() + src + 1);
      a = predict(prefix, batch, act_prune).reshaped(prefix.infer_shapes(batch.dim(0)).back());
    }
    const std::size_t C = gn.gamma.size();
    const std::size_t per = C / static_cast<std::size_t>(gn.groups);
    const std::size_t rows = a.size() / C;
    for (int grp = 0; grp < gn.groups; ++grp) {
      double s = 0, ss = 0;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = grp * per; c < (grp + 1) * per; ++c) {
          const double v = a[r * C + c];
          s += v;
          ss += v * v;
        }
      const double cnt = static_cast<double>(rows * per);
      const double mean = s / cnt;
      const double var = std::max(0.0, ss / cnt - mean * mean);
      for (std::size_t c = grp * per; c < (grp + 1) * per; ++c) {
        gn.mean[c] = static_cast<T>(mean);
        gn.var[c] = static_cast<T>(var);
      }
    }
  }
}

}  // namespace spu
