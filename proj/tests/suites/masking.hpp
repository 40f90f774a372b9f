// SPDX-License-Identifier: Apache-2.0
//
// Gradient masking exactness: grads outside (selected channels ∩ weight-mask
// support) must be bitwise zero, and a full-selection plan must reproduce a
// plain dense backward bit for bit.
#pragma once

#include <bit>
#include <cstring>

#include "suites/gradcheck.hpp"

namespace spu::suites {

template <typename T>
bool bitwise_zero(T v) {
  if constexpr (sizeof(T) == 4)
    return std::bit_cast<std::uint32_t>(v) == 0u;
  else
    return std::bit_cast<std::uint64_t>(v) == 0u;
}

/// Dense reference backward: every weight layer, every channel, no masks,
/// written independently of the engine's plan logic.
template <typename T>
std::vector<std::pair<Tensor<T>, std::vector<T>>> dense_reference_backward(const ModelGraph<T>& m, const Tensor<T>& x,
                                                                           int label, const BlockPruneConfig& pc) {
  const std::size_t L = m.size();
  std::vector<Tensor<T>> outs(L), ins(L);
  std::vector<Bitset> keeps(L);
  for (std::size_t i = 0; i < L; ++i) {
    const auto& n = m[i];
    auto in = [&](std::size_t k) -> const Tensor<T>& {
      const int s = n.inputs[k];
      return s == kModelInput ? x : outs[static_cast<std::size_t>(s)];
    };
    ins[i] = in(0);
    switch (n.kind) {
      case LayerKind::Conv2d: outs[i] = conv_forward(in(0), n.weight, std::span<const T>(n.bias), n.stride, n.pad); break;
      case LayerKind::DepthwiseConv2d:
        outs[i] = depthwise_forward(in(0), n.weight, std::span<const T>(n.bias), n.stride, n.pad);
        break;
      case LayerKind::Linear: outs[i] = linear_forward(in(0), n.weight, std::span<const T>(n.bias)); break;
      case LayerKind::ReLU: {
        auto r = relu_block_prune(in(0), pc.block, pc.threshold);
        outs[i] = r.y;
        keeps[i] = r.keep;
        break;
      }
      case LayerKind::GroupNorm:
        outs[i] = groupnorm_forward_frozen(in(0), std::span<const T>(n.gamma), std::span<const T>(n.beta),
                                           std::span<const T>(n.mean), std::span<const T>(n.var), n.groups, n.eps);
        break;
      case LayerKind::ResidualAdd:
        outs[i] = in(0);
        for (std::size_t k = 0; k < outs[i].size(); ++k) outs[i][k] += in(1)[k];
        break;
      case LayerKind::AvgPool: outs[i] = global_avgpool_forward(in(0)); break;
      case LayerKind::Flatten: outs[i] = in(0).reshaped({in(0).dim(0), in(0).size() / in(0).dim(0)}); break;
    }
  }
  const auto logits = outs.back().reshaped({x.dim(0), outs.back().size() / x.dim(0)});
  auto lr = cross_entropy_loss(logits, label);
  std::vector<std::optional<Tensor<T>>> g(L);
  g[L - 1] = lr.grad_logits.reshaped(outs.back().shape());
  std::vector<std::pair<Tensor<T>, std::vector<T>>> res(L);
  auto add = [&](int s, Tensor<T> v) {
    if (s == kModelInput) return;
    auto& slot = g[static_cast<std::size_t>(s)];
    if (!slot)
      slot = std::move(v);
    else
      for (std::size_t k = 0; k < v.size(); ++k) (*slot)[k] += v[k];
  };
  for (std::size_t i = L; i-- > 0;) {
    if (!g[i]) continue;
    const auto& n = m[i];
    const Tensor<T>& go = *g[i];
    switch (n.kind) {
      case LayerKind::Conv2d:
        res[i].first = conv_weight_grad_dense(ins[i], go, n.weight.dim(0), n.weight.dim(1), n.stride, n.pad);
        if (!n.bias.empty()) res[i].second = channel_bias_grad(go, all_channels(n.out_channels()));
        add(n.inputs[0], conv_input_grad(go, n.weight, ins[i].shape(), n.stride, n.pad));
        break;
      case LayerKind::DepthwiseConv2d: {
        const std::size_t N = ins[i].dim(0), H = ins[i].dim(1), W = ins[i].dim(2), C = ins[i].dim(3);
        const std::size_t KH = n.weight.dim(0), KW = n.weight.dim(1);
        Tensor<T> gw({KH, KW, C});
        for (std::size_t b = 0; b < N; ++b)
          for (std::size_t oh = 0; oh < go.dim(1); ++oh)
            for (std::size_t ow = 0; ow < go.dim(2); ++ow)
              for (std::size_t kh = 0; kh < KH; ++kh) {
                const long ih = static_cast<long>(oh) * n.stride + static_cast<long>(kh) - n.pad;
                if (ih < 0 || ih >= static_cast<long>(H)) continue;
                for (std::size_t kw = 0; kw < KW; ++kw) {
                  const long iw = static_cast<long>(ow) * n.stride + static_cast<long>(kw) - n.pad;
                  if (iw < 0 || iw >= static_cast<long>(W)) continue;
                  for (std::size_t c = 0; c < C; ++c)
                    gw[(kh * KW + kw) * C + c] +=
                        ins[i].at(b, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw), c) * go.at(b, oh, ow, c);
                }
              }
        res[i].first = gw;
        if (!n.bias.empty()) res[i].second = channel_bias_grad(go, all_channels(C));
        add(n.inputs[0], depthwise_input_grad(go, n.weight, ins[i].shape(), n.stride, n.pad));
        break;
      }
      case LayerKind::Linear: {
        const std::size_t N = ins[i].dim(0), Cin = ins[i].dim(1), Cout = go.dim(1);
        Tensor<T> gw({Cin, Cout});
        for (std::size_t b = 0; b < N; ++b)
          for (std::size_t a = 0; a < Cin; ++a)
            for (std::size_t o = 0; o < Cout; ++o) gw[a * Cout + o] += ins[i][b * Cin + a] * go[b * Cout + o];
        res[i].first = gw;
        if (!n.bias.empty()) res[i].second = channel_bias_grad(go, all_channels(Cout));
        add(n.inputs[0], linear_input_grad(go, n.weight));
        break;
      }
      case LayerKind::ReLU: add(n.inputs[0], relu_block_backward(go, keeps[i])); break;
      case LayerKind::GroupNorm:
        add(n.inputs[0], groupnorm_backward_frozen(go, std::span<const T>(n.gamma), std::span<const T>(n.var), n.eps));
        break;
      case LayerKind::ResidualAdd:
        add(n.inputs[0], go);
        add(n.inputs[1], go);
        break;
      case LayerKind::AvgPool: add(n.inputs[0], global_avgpool_backward(go, ins[i].shape())); break;
      case LayerKind::Flatten: add(n.inputs[0], go.reshaped(ins[i].shape())); break;
    }
  }
  return res;
}

struct MaskingResult {
  int pairs = 0;
  int violations = 0;       // nonzero grad outside selected ∩ mask
  int full_plan_checks = 0;
  int full_plan_mismatches = 0;
};

inline ModelGraph<float> random_masked_model(Rng& rng) {
  ModelGraph<float> m;
  if (rng.below(2) == 0) {
    const std::size_t w0 = 4 + rng.below(5), w1 = 4 + rng.below(9), w2 = 4 + rng.below(9);
    m = make_toy_cnn<float>(6, 2, {w0, w1, w2}, {1, 2, 1}, 2 + static_cast<int>(rng.below(4)), rng.next_u64());
  } else {
    m = random_residual_model(rng).cast<float>();
  }
  for (auto& n : m.nodes) {
    if (!has_weights(n.kind)) continue;
    if (!n.bias.empty() || rng.below(2))
      for (auto& v : n.bias) v = static_cast<float>(rng.normal() * 0.1);
    if (rng.below(3) != 0) {
      n.mask.assign(n.weight.size(), 1);
      for (auto& v : n.mask) v = rng.uniform() < 0.3 ? 0 : 1;
      n.apply_mask();
    }
  }
  return m;
}

inline MaskingResult masking_exactness(int pairs, std::uint64_t seed) {
  Rng rng(seed);
  MaskingResult r;
  const BlockPruneConfig pc{2, 0.15};
  for (int p = 0; p < pairs; ++p) {
    auto m = random_masked_model(rng);
    auto x = testing::random_tensor<float>({1, m.input_shape[0], m.input_shape[1], m.input_shape[2]}, rng);
    const int label = static_cast<int>(rng.below(static_cast<std::uint64_t>(m.num_classes)));
    const bool full = p % 4 == 0;
    UpdatePlan plan = full ? full_plan(m) : empty_plan(m);
    if (!full) {
      for (const auto& n : m.nodes)
        if (has_weights(n.kind) && rng.below(2))
          set_trainable(plan, m, n.id, detail::random_subset(rng, static_cast<int>(n.out_channels())));
      if (!plan.any_trainable()) plan = classifier_plan(m);
    }
    auto fw = forward(m, x, plan, pc);
    auto grads = backward(m, fw.cache, cross_entropy_loss(fw.logits, label).grad_logits, plan);
    ++r.pairs;
    bool bad = false;
    for (const auto& n : m.nodes) {
      if (!has_weights(n.kind)) continue;
      const auto* pg = grads.find(n.id);
      if (!plan.trainable(n.id)) {
        if (pg) bad = true;
        continue;
      }
      if (!pg) {
        bad = true;
        continue;
      }
      const std::size_t cout = n.out_channels();
      auto full_w = expand_selected(pg->weight, pg->selected, cout);
      for (std::size_t i = 0; i < full_w.size(); ++i) {
        const bool in_sel = std::binary_search(pg->selected.begin(), pg->selected.end(), static_cast<int>(i % cout));
        if ((!in_sel || n.masked(i)) && !bitwise_zero(full_w[i])) bad = true;
      }
    }
    if (bad) ++r.violations;
    if (full) {
      ++r.full_plan_checks;
      auto ref = dense_reference_backward(m, x, label, pc);
      bool mismatch = false;
      for (const auto& pg : grads.params) {
        const auto& n = m[static_cast<std::size_t>(pg.node)];
        const auto& [rw, rb] = ref[static_cast<std::size_t>(pg.node)];
        for (std::size_t i = 0; i < rw.size(); ++i) {
          const float want = n.masked(i) ? 0.0f : rw[i];
          if (std::bit_cast<std::uint32_t>(pg.weight[i]) != std::bit_cast<std::uint32_t>(want)) mismatch = true;
        }
        if (pg.bias.size() != rb.size() || std::memcmp(pg.bias.data(), rb.data(), rb.size() * sizeof(float)) != 0)
          mismatch = true;
      }
      if (mismatch) ++r.full_plan_mismatches;
    }
  }
  return r;
}

}  // namespace spu::suites
