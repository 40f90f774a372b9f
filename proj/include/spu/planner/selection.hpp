// SPDX-License-Identifier: Apache-2.0
//
// Later-layers-first selection under a byte budget.
#pragma once

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "spu/planner/memory_model.hpp"

namespace spu {

class BudgetError : public std::runtime_error {
 public:
  BudgetError(std::size_t needed, std::size_t budget, const std::string& what = "classifier alone")
      : std::runtime_error(what + " needs " + std::to_string(needed) + " bytes, budget is " + std::to_string(budget)),
        needed_(needed), budget_(budget) {}
  std::size_t needed() const noexcept { return needed_; }
  std::size_t budget() const noexcept { return budget_; }

 private:
  std::size_t needed_, budget_;
};

/// L2 norm of every output channel's kernel slice (masked taps count as zero).
template <typename T>
std::vector<double> channel_norms(const LayerNode<T>& n) {
  const std::size_t cout = n.out_channels();
  std::vector<double> sq(cout, 0.0);
  for (std::size_t i = 0; i < n.weight.size(); ++i) {
    if (n.masked(i)) continue;
    const double w = static_cast<double>(n.weight[i]);
    sq[i % cout] += w * w;
  }
  for (auto& v : sq) v = std::sqrt(v);
  return sq;
}

/// Indices of the `count` largest-norm channels, sorted. Ties go to the lower index.
template <typename T>
ChannelSet top_norm_channels(const LayerNode<T>& n, std::size_t count) {
  const auto norms = channel_norms(n);
  std::vector<int> order(norms.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return norms[static_cast<std::size_t>(a)] > norms[static_cast<std::size_t>(b)];
  });
  order.resize(std::min(count, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

/// Classifier first, then backbone weight layers from the output end. Each layer
/// is admitted whole with ceil(r * Cout) top-norm channels while the cumulative
/// footprint stays within `budget`; the first layer that does not fit ends the scan.
template <typename T>
UpdatePlan plan_selection(const ModelGraph<T>& m, std::size_t budget, double r, const MemoryModel& mm = {}) {
  require(budget > 0, "plan_selection: budget must be positive");
  require(r > 0.0 && r <= 1.0, "plan_selection: ratio must be in (0, 1]");
  const auto ins = m.infer_input_shapes(mm.batch);
  const auto outs = m.infer_shapes(mm.batch);

  auto plan = classifier_plan(m);
  const auto base = plan_footprint_bytes(m, plan, mm, ins, outs);
  if (base > budget) throw BudgetError(base, budget);

  const auto backbone = m.backbone_layers();
  for (auto it = backbone.rbegin(); it != backbone.rend(); ++it) {
    const auto& n = m[static_cast<std::size_t>(*it)];
    auto trial = plan;
    set_trainable(trial, m, *it, top_norm_channels(n, channels_for_ratio(r, n.out_channels())));
    if (plan_footprint_bytes(m, trial, mm, ins, outs) > budget) break;
    plan = std::move(trial);
  }
  return plan;
}

}  // namespace spu
