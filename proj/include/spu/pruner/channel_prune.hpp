// SPDX-License-Identifier: Apache-2.0
//
// Structured channel pruning over dependency groups. A channel's importance is
// the L2 norm of every parameter slice coupled to it (kernel rows/columns,
// bias, GroupNorm gamma/beta); the lowest-norm channels are removed from all
// members at once so shapes stay consistent.
#pragma once

#include <cmath>

#include "spu/builders.hpp"
#include "spu/plan.hpp"
#include "spu/pruner/dependency.hpp"

namespace spu {

struct ChannelPruneResult {
  std::vector<DependencyGroup> groups;
  std::vector<ChannelSet> kept;  // per group, sorted original indices
  std::size_t params_before = 0;
  std::size_t params_after = 0;

  double removed_fraction() const {
    return params_before ? 1.0 - static_cast<double>(params_after) / static_cast<double>(params_before) : 0.0;
  }
  double kept_fraction() const {
    return params_before ? static_cast<double>(params_after) / static_cast<double>(params_before) : 0.0;
  }
};

namespace detail {

// Weight index of (tap, in-channel, out-channel) for conv (kh,kw,Cin,Cout),
// depthwise (kh,kw,C) and linear (Cin,Cout) layouts; all are channel-last.
template <typename T>
void add_slice_norms(const LayerNode<T>& n, ChannelAxis axis, std::vector<double>& sq) {
  auto add = [&](std::size_t c, double v) { sq[c] += v * v; };
  switch (n.kind) {
    case LayerKind::Conv2d:
    case LayerKind::Linear: {
      const std::size_t cout = n.out_channels(), cin = n.in_channels();
      for (std::size_t i = 0; i < n.weight.size(); ++i) {
        const std::size_t co = i % cout, ci = (i / cout) % cin;
        add(axis == ChannelAxis::Out ? co : ci, static_cast<double>(n.weight[i]));
      }
      if (axis == ChannelAxis::Out)
        for (std::size_t c = 0; c < n.bias.size(); ++c) add(c, static_cast<double>(n.bias[c]));
      break;
    }
    case LayerKind::DepthwiseConv2d: {
      const std::size_t c = n.out_channels();
      for (std::size_t i = 0; i < n.weight.size(); ++i) add(i % c, static_cast<double>(n.weight[i]));
      for (std::size_t k = 0; k < n.bias.size(); ++k) add(k, static_cast<double>(n.bias[k]));
      break;
    }
    case LayerKind::GroupNorm:
      for (std::size_t c = 0; c < n.gamma.size(); ++c) {
        add(c, static_cast<double>(n.gamma[c]));
        add(c, static_cast<double>(n.beta[c]));
      }
      break;
    default: break;
  }
}

template <typename T>
std::vector<T> gather(const std::vector<T>& v, const ChannelSet& keep) {
  if (v.empty()) return v;
  std::vector<T> out;
  out.reserve(keep.size());
  for (int c : keep) out.push_back(v[static_cast<std::size_t>(c)]);
  return out;
}

// Keeps only `keep` along the out (last) or in (second to last) axis of a
// channel-last weight, slicing the mask alongside.
template <typename T>
void slice_weight(LayerNode<T>& n, ChannelAxis axis, const ChannelSet& keep) {
  Shape s = n.weight.shape();
  const bool out_axis = axis != ChannelAxis::In;
  const std::size_t dim = out_axis ? s.size() - 1 : s.size() - 2;
  const std::size_t inner = out_axis ? 1 : s.back();
  const std::size_t extent = s[dim];
  const std::size_t outer = n.weight.size() / (extent * inner);
  Shape ns = s;
  ns[dim] = keep.size();
  Tensor<T> w(ns);
  WeightMask mask;
  if (!n.mask.empty()) mask.resize(w.size());
  std::size_t o = 0;
  for (std::size_t a = 0; a < outer; ++a)
    for (int c : keep)
      for (std::size_t b = 0; b < inner; ++b, ++o) {
        const std::size_t src = (a * extent + static_cast<std::size_t>(c)) * inner + b;
        w[o] = n.weight[src];
        if (!mask.empty()) mask[o] = n.mask[src];
      }
  n.weight = std::move(w);
  n.mask = std::move(mask);
}

}  // namespace detail

/// Per-channel importance of a group.
template <typename T>
std::vector<double> group_channel_norms(const ModelGraph<T>& m, const DependencyGroup& g) {
  std::vector<double> sq(g.channels, 0.0);
  for (const auto& mem : g.members) detail::add_slice_norms(m[static_cast<std::size_t>(mem.node)], mem.axis, sq);
  for (auto& v : sq) v = std::sqrt(v);
  return sq;
}

/// Removes exactly the channels not in `kept[g]` from each group's members.
template <typename T>
ModelGraph<T> apply_channel_selection(const ModelGraph<T>& m, const std::vector<DependencyGroup>& groups,
                                      const std::vector<ChannelSet>& kept) {
  require(groups.size() == kept.size(), "channel selection: one kept set per group required");
  ModelGraph<T> out = m;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& keep = kept[gi];
    require(!keep.empty(), "channel pruning would leave zero channels in a group");
    check_selection(keep, groups[gi].channels);
    for (const auto& mem : groups[gi].members) {
      auto& n = out[static_cast<std::size_t>(mem.node)];
      switch (n.kind) {
        case LayerKind::Conv2d:
        case LayerKind::Linear:
          detail::slice_weight(n, mem.axis, keep);
          if (mem.axis == ChannelAxis::Out) n.bias = detail::gather(n.bias, keep);
          break;
        case LayerKind::DepthwiseConv2d:
          detail::slice_weight(n, ChannelAxis::Channel, keep);
          n.bias = detail::gather(n.bias, keep);
          break;
        case LayerKind::GroupNorm:
          n.gamma = detail::gather(n.gamma, keep);
          n.beta = detail::gather(n.beta, keep);
          n.mean = detail::gather(n.mean, keep);
          n.var = detail::gather(n.var, keep);
          n.groups = default_gn_groups(keep.size());
          break;
        default: break;
      }
    }
  }
  out.infer_shapes(1);
  return out;
}

/// Keeps ceil(keep_ratio * C) highest-norm channels in each group (ties keep
/// the lower index) and returns the pruned model with the kept indices.
template <typename T>
std::pair<ModelGraph<T>, ChannelPruneResult> channel_prune_detailed(const ModelGraph<T>& m, double keep_ratio) {
  require(keep_ratio > 0.0 && keep_ratio <= 1.0, "channel_prune: keep_ratio must be in (0, 1]");
  ChannelPruneResult r;
  r.groups = build_dependency_groups(m);
  r.params_before = m.param_count();
  for (const auto& g : r.groups) {
    const auto norms = group_channel_norms(m, g);
    ChannelSet order(g.channels);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return norms[static_cast<std::size_t>(a)] > norms[static_cast<std::size_t>(b)];
    });
    order.resize(channels_for_ratio(keep_ratio, g.channels));
    std::sort(order.begin(), order.end());
    r.kept.push_back(std::move(order));
  }
  auto pruned = apply_channel_selection(m, r.groups, r.kept);
  r.params_after = pruned.param_count();
  return {std::move(pruned), std::move(r)};
}

template <typename T>
ModelGraph<T> channel_prune(const ModelGraph<T>& m, double keep_ratio) {
  return channel_prune_detailed(m, keep_ratio).first;
}

}  // namespace spu
