// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "spu/model.hpp"

namespace spu {

struct LayerPlan {
  bool trainable = false;
  ChannelSet selected;  // sorted, unique, within [0, Cout)
  double ratio_used = 0.0;

  friend bool operator==(const LayerPlan&, const LayerPlan&) = default;
};

/// Which layers and output channels receive weight updates. Indexed by node id.
struct UpdatePlan {
  std::vector<LayerPlan> layers;
  bool classifier_trainable = false;
  std::int64_t plan_id = 0;

  bool trainable(int id) const {
    return id >= 0 && static_cast<std::size_t>(id) < layers.size() &&
           layers[static_cast<std::size_t>(id)].trainable;
  }
  const ChannelSet& selected(int id) const { return layers.at(static_cast<std::size_t>(id)).selected; }
  bool any_trainable() const {
    for (const auto& l : layers)
      if (l.trainable) return true;
    return false;
  }
  /// Node ids of trainable layers in topological order.
  std::vector<int> trainable_ids() const {
    std::vector<int> ids;
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].trainable) ids.push_back(static_cast<int>(i));
    return ids;
  }

  friend bool operator==(const UpdatePlan&, const UpdatePlan&) = default;
};

/// Channels a layer updates at ratio r: ceil(r * Cout), at least 1.
inline std::size_t channels_for_ratio(double r, std::size_t cout) {
  const auto s = static_cast<std::size_t>(std::ceil(r * static_cast<double>(cout) - 1e-9));
  return std::clamp<std::size_t>(s, 1, cout);
}

template <typename T>
UpdatePlan empty_plan(const ModelGraph<T>& m) {
  UpdatePlan p;
  p.layers.resize(m.size());
  return p;
}

template <typename T>
void set_trainable(UpdatePlan& p, const ModelGraph<T>& m, int id, ChannelSet selected) {
  auto& l = p.layers.at(static_cast<std::size_t>(id));
  const auto cout = m[static_cast<std::size_t>(id)].out_channels();
  l.trainable = !selected.empty();
  l.ratio_used = cout ? static_cast<double>(selected.size()) / static_cast<double>(cout) : 0.0;
  l.selected = std::move(selected);
  if (id == m.classifier_id()) p.classifier_trainable = l.trainable;
}

/// Classifier only (the "last" baseline).
template <typename T>
UpdatePlan classifier_plan(const ModelGraph<T>& m) {
  auto p = empty_plan(m);
  const int cls = m.classifier_id();
  if (cls >= 0) set_trainable(p, m, cls, all_channels(m[static_cast<std::size_t>(cls)].out_channels()));
  return p;
}

/// Every weight layer, every channel (dense fine-tuning).
template <typename T>
UpdatePlan full_plan(const ModelGraph<T>& m) {
  auto p = empty_plan(m);
  for (const auto& n : m.nodes)
    if (has_weights(n.kind)) set_trainable(p, m, n.id, all_channels(n.out_channels()));
  return p;
}

template <typename T>
void validate_plan(const ModelGraph<T>& m, const UpdatePlan& p) {
  require(p.layers.size() == m.size(), "plan has " + std::to_string(p.layers.size()) +
                                           " entries for a model with " + std::to_string(m.size()) + " nodes");
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto& l = p.layers[i];
    if (!l.trainable) {
      require(l.selected.empty(), "plan: frozen node " + std::to_string(i) + " lists channels");
      continue;
    }
    require(has_weights(m[i].kind), "plan: node " + std::to_string(i) + " has no weights to train");
    require(!l.selected.empty(), "plan: trainable node " + std::to_string(i) + " selects no channels");
    check_selection(l.selected, m[i].out_channels());
  }
}

/// on_path[i] is true when node i's output depends on a trainable parameter,
/// i.e. gradient w.r.t. node i's output is needed during backward.
template <typename T>
std::vector<bool> backward_path(const ModelGraph<T>& m, const UpdatePlan& p) {
  std::vector<bool> on(m.size(), false);
  for (std::size_t i = 0; i < m.size(); ++i) {
    bool v = p.trainable(static_cast<int>(i));
    for (int src : m[i].inputs)
      if (src != kModelInput && on[static_cast<std::size_t>(src)]) v = true;
    on[i] = v;
  }
  return on;
}

inline bool input_on_path(const std::vector<bool>& on, int src) {
  return src != kModelInput && on[static_cast<std::size_t>(src)];
}

}  // namespace spu
