// SPDX-License-Identifier: Apache-2.0
//
// Experimental: move budget from the layer with the smallest accumulated
// gradient L1 sum to the layers with the largest. It did not beat a fixed
// layer set in practice, so the trainer only uses it when asked to.
#pragma once

#include <numeric>

#include "spu/planner/selection.hpp"

namespace spu {

/// `grad_l1` is indexed by node id and must cover every trainable layer.
/// The single smallest-sum backbone layer is frozen when its sum is strictly
/// below the largest; receivers, largest sum first, grow up to twice their
/// channel count (next channels by kernel norm) while the plan fits `budget`.
template <typename T>
UpdatePlan gradient_sum_reallocate(const ModelGraph<T>& m, const UpdatePlan& plan, const std::vector<double>& grad_l1,
                                   std::size_t budget, const MemoryModel& mm = {}) {
  validate_plan(m, plan);
  const int cls = m.classifier_id();
  std::vector<int> layers;
  for (int id : plan.trainable_ids()) {
    require(static_cast<std::size_t>(id) < grad_l1.size(), "gradient_sum_reallocate: missing gradient sum for node " +
                                                                std::to_string(id));
    if (id != cls) layers.push_back(id);
  }
  if (layers.size() < 2) return plan;

  auto sum = [&](int id) { return grad_l1[static_cast<std::size_t>(id)]; };
  // Largest first; ties keep topological order.
  std::stable_sort(layers.begin(), layers.end(), [&](int a, int b) { return sum(a) > sum(b); });
  const int victim = layers.back();
  if (!(sum(victim) < sum(layers.front()))) return plan;
  // Among equal smallest sums, freeze the earliest layer.
  int frozen = victim;
  for (int id : layers)
    if (sum(id) == sum(victim)) frozen = std::min(frozen, id);

  const auto ins = m.infer_input_shapes(mm.batch);
  const auto outs = m.infer_shapes(mm.batch);
  UpdatePlan out = plan;
  set_trainable(out, m, frozen, {});

  for (int id : layers) {
    if (id == frozen) continue;
    const auto& n = m[static_cast<std::size_t>(id)];
    const std::size_t have = out.selected(id).size();
    const std::size_t limit = std::min(n.out_channels(), 2 * have);
    if (limit <= have) continue;
    // Order of channels to add: current ones kept, the rest by kernel norm.
    const auto norms = channel_norms(n);
    std::vector<int> extra;
    for (std::size_t c = 0; c < n.out_channels(); ++c)
      if (!std::binary_search(out.selected(id).begin(), out.selected(id).end(), static_cast<int>(c)))
        extra.push_back(static_cast<int>(c));
    std::stable_sort(extra.begin(), extra.end(), [&](int a, int b) {
      return norms[static_cast<std::size_t>(a)] > norms[static_cast<std::size_t>(b)];
    });
    auto with = [&](std::size_t count) {
      auto p = out;
      ChannelSet sel = p.selected(id);
      sel.insert(sel.end(), extra.begin(), extra.begin() + static_cast<std::ptrdiff_t>(count - have));
      std::sort(sel.begin(), sel.end());
      set_trainable(p, m, id, std::move(sel));
      return p;
    };
    // Footprint grows with the channel count, so bisect for the largest fit.
    std::size_t lo = have, hi = limit;
    while (lo < hi) {
      const std::size_t mid = lo + (hi - lo + 1) / 2;
      if (plan_footprint_bytes(m, with(mid), mm, ins, outs) <= budget)
        lo = mid;
      else
        hi = mid - 1;
    }
    if (lo > have) out = with(lo);
  }
  return out;
}

}  // namespace spu
