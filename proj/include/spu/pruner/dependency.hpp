// SPDX-License-Identifier: Apache-2.0
//
// Channel-coupling groups. Every node output carries one channel axis;
// depthwise conv, GroupNorm, ReLU, pooling and flatten-after-pooling pass
// their input's axis through, a residual add merges both operand axes, and
// conv / linear layers start a new axis. Axes reachable from the model input
// or the model output are not prunable.
#pragma once

#include <map>
#include <numeric>

#include "spu/model.hpp"

namespace spu {

enum class ChannelAxis : std::uint8_t { Out, In, Channel };

struct GroupMember {
  int node = 0;
  ChannelAxis axis = ChannelAxis::Channel;
  friend bool operator==(const GroupMember&, const GroupMember&) = default;
};

struct DependencyGroup {
  std::vector<GroupMember> members;  // ordered by node id, then axis
  std::size_t channels = 0;
};

namespace detail {

struct UnionFind {
  std::vector<int> parent;
  int make() {
    parent.push_back(static_cast<int>(parent.size()));
    return parent.back();
  }
  int find(int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
      x = parent[static_cast<std::size_t>(x)];
    }
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
  }
};

}  // namespace detail

/// Groups of coupled channel axes that can be pruned together. Only groups
/// containing at least one parameterised member are returned.
template <typename T>
std::vector<DependencyGroup> build_dependency_groups(const ModelGraph<T>& m) {
  const auto shapes = m.infer_shapes(1);
  detail::UnionFind uf;
  const int input_axis = uf.make();
  std::vector<int> axis(m.size(), -1);
  std::vector<int> poisoned{input_axis};
  std::vector<std::pair<GroupMember, int>> members;

  auto axis_of = [&](int src) { return src == kModelInput ? input_axis : axis[static_cast<std::size_t>(src)]; };
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto& n = m[i];
    const int id = static_cast<int>(i);
    const int in = axis_of(n.inputs[0]);
    switch (n.kind) {
      case LayerKind::Conv2d:
      case LayerKind::Linear:
        members.push_back({{id, ChannelAxis::In}, in});
        axis[i] = uf.make();
        members.push_back({{id, ChannelAxis::Out}, axis[i]});
        break;
      case LayerKind::DepthwiseConv2d:
      case LayerKind::GroupNorm:
        axis[i] = in;
        members.push_back({{id, ChannelAxis::Channel}, in});
        break;
      case LayerKind::ResidualAdd:
        require(shapes[i].back() == shapes[static_cast<std::size_t>(n.inputs[0])].back(),
                "dependency: residual add channel mismatch at node " + std::to_string(i));
        uf.unite(in, axis_of(n.inputs[1]));
        axis[i] = in;
        members.push_back({{id, ChannelAxis::Channel}, in});
        break;
      case LayerKind::Flatten: {
        // Flattening spatial positions mixes channel and position indices.
        const auto& s = n.inputs[0] == kModelInput ? Shape{} : shapes[static_cast<std::size_t>(n.inputs[0])];
        axis[i] = in;
        if (s.size() == 4 && (s[1] != 1 || s[2] != 1)) poisoned.push_back(in);
        break;
      }
      default: axis[i] = in; break;
    }
  }
  if (!m.nodes.empty()) poisoned.push_back(axis.back());

  std::map<int, bool> dead;
  for (int p : poisoned) dead[uf.find(p)] = true;
  std::map<int, DependencyGroup> groups;
  for (const auto& [mem, ax] : members) {
    const int root = uf.find(ax);
    if (dead.count(root)) continue;
    auto& g = groups[root];
    g.members.push_back(mem);
  }
  std::vector<DependencyGroup> out;
  for (auto& [root, g] : groups) {
    bool has_params = false;
    for (const auto& mem : g.members) {
      const auto& n = m[static_cast<std::size_t>(mem.node)];
      if (has_weights(n.kind) || n.kind == LayerKind::GroupNorm) has_params = true;
    }
    if (!has_params) continue;
    std::sort(g.members.begin(), g.members.end(), [](const GroupMember& a, const GroupMember& b) {
      return a.node != b.node ? a.node < b.node : a.axis < b.axis;
    });
    const auto& first = g.members.front();
    const auto& fn = m[static_cast<std::size_t>(first.node)];
    g.channels = first.axis == ChannelAxis::In ? fn.in_channels()
                 : fn.kind == LayerKind::ResidualAdd ? shapes[static_cast<std::size_t>(first.node)].back()
                                                     : fn.out_channels();
    out.push_back(std::move(g));
  }
  // Groups in order of their first member.
  std::sort(out.begin(), out.end(), [](const DependencyGroup& a, const DependencyGroup& b) {
    return a.members.front().node != b.members.front().node ? a.members.front().node < b.members.front().node
                                                            : a.members.front().axis < b.members.front().axis;
  });
  return out;
}

}  // namespace spu
