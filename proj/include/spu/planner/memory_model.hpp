// SPDX-License-Identifier: Apache-2.0
//
// Byte accounting for the extra state sparse-update backpropagation holds:
// stored input activations, weight/bias gradient buffers and 1-bit ReLU
// masks. The transient grad_in/grad_out double buffer is reported separately
// and not part of the total.
#pragma once

#include <algorithm>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "spu/plan.hpp"

namespace spu {

struct MemoryModel {
  std::size_t bytes_per_activation_element = 4;
  std::size_t bytes_per_grad_element = 4;
  std::size_t relu_mask_bits = 1;
  std::size_t batch = 1;
  bool count_relu_masks = true;
  bool count_bias_grads = true;
};

struct LayerFootprint {
  std::size_t activation_bytes = 0;
  std::size_t weight_grad_bytes = 0;
  std::size_t bias_grad_bytes = 0;
  std::size_t mask_bytes = 0;

  std::size_t total() const { return activation_bytes + weight_grad_bytes + bias_grad_bytes + mask_bytes; }
  friend bool operator==(const LayerFootprint&, const LayerFootprint&) = default;
};

/// Footprint of one node. `in_shape`/`out_shape` include the batch dimension;
/// `on_backward_path` says whether gradient must flow through the node's input.
template <typename T>
LayerFootprint layer_footprint(const LayerNode<T>& node, std::size_t selected_count, const Shape& in_shape,
                               const Shape& out_shape, bool on_backward_path, const MemoryModel& mm = {}) {
  LayerFootprint f;
  const std::size_t s = selected_count;
  switch (node.kind) {
    case LayerKind::Conv2d:
      if (s) {
        f.activation_bytes = shape_numel(in_shape) * mm.bytes_per_activation_element;
        f.weight_grad_bytes = node.kernel_h() * node.kernel_w() * node.in_channels() * s * mm.bytes_per_grad_element;
      }
      break;
    case LayerKind::DepthwiseConv2d:
      if (s) {
        f.activation_bytes = in_shape[0] * in_shape[1] * in_shape[2] * s * mm.bytes_per_activation_element;
        f.weight_grad_bytes = node.kernel_h() * node.kernel_w() * s * mm.bytes_per_grad_element;
      }
      break;
    case LayerKind::Linear:
      if (s) {
        f.activation_bytes = shape_numel(in_shape) * mm.bytes_per_activation_element;
        f.weight_grad_bytes = node.in_channels() * s * mm.bytes_per_grad_element;
      }
      break;
    case LayerKind::ReLU:
      if (on_backward_path && mm.count_relu_masks) f.mask_bytes = (shape_numel(out_shape) * mm.relu_mask_bits + 7) / 8;
      break;
    default: break;
  }
  if (s && has_weights(node.kind) && !node.bias.empty() && mm.count_bias_grads)
    f.bias_grad_bytes = s * mm.bytes_per_grad_element;
  return f;
}

struct FootprintRow {
  int node = 0;
  std::string name;
  LayerKind kind{};
  LayerFootprint bytes;
};

struct BudgetReport {
  std::vector<FootprintRow> rows;  // nodes with a nonzero footprint
  std::size_t total_bytes = 0;
  std::size_t dense_total_bytes = 0;
  double reduction_fraction = 0.0;  // 1 - total / dense_total

  // Feature memory = stored activations + ReLU masks.
  std::size_t feature_bytes = 0;
  std::size_t dense_feature_bytes = 0;
  double feature_reduction = 0.0;

  std::size_t workspace_bytes = 0;        // transient grad buffers, excluded from total
  std::size_t dense_workspace_bytes = 0;
  int trainable_backbone_layers = 0;      // conv / depthwise layers in the plan
  double updated_conv_weight_fraction = 0.0;  // selected ∩ mask conv weights / all conv weights
  double updated_param_fraction = 0.0;        // all updated params / all params
};

namespace detail {

struct FootprintTotals {
  std::vector<FootprintRow> rows;
  std::size_t total = 0, feature = 0, workspace = 0;
};

template <typename T>
FootprintTotals accumulate_footprint(const ModelGraph<T>& m, const UpdatePlan& plan, const MemoryModel& mm,
                                        const std::vector<Shape>& ins, const std::vector<Shape>& outs) {
  FootprintTotals t;
  const auto on = backward_path(m, plan);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto& n = m[i];
    const std::size_t s = plan.trainable(static_cast<int>(i)) ? plan.layers[i].selected.size() : 0;
    auto f = layer_footprint(n, s, ins[i], outs[i], input_on_path(on, n.inputs[0]), mm);
    if (f.total()) {
      t.rows.push_back({n.id, n.name, n.kind, f});
      t.total += f.total();
      t.feature += f.activation_bytes + f.mask_bytes;
    }
    if (on[i]) {
      std::size_t ws = shape_numel(outs[i]);
      if (input_on_path(on, n.inputs[0])) ws += shape_numel(ins[i]);
      t.workspace = std::max(t.workspace, ws * mm.bytes_per_grad_element);
    }
  }
  return t;
}

}  // namespace detail

/// Total extra bytes only (fast path used by the planner).
template <typename T>
std::size_t plan_footprint_bytes(const ModelGraph<T>& m, const UpdatePlan& plan, const MemoryModel& mm,
                                 const std::vector<Shape>& ins, const std::vector<Shape>& outs) {
  std::size_t total = 0;
  const auto on = backward_path(m, plan);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const std::size_t s = plan.trainable(static_cast<int>(i)) ? plan.layers[i].selected.size() : 0;
    total += layer_footprint(m[i], s, ins[i], outs[i], input_on_path(on, m[i].inputs[0]), mm).total();
  }
  return total;
}

template <typename T>
std::size_t plan_footprint_bytes(const ModelGraph<T>& m, const UpdatePlan& plan, const MemoryModel& mm = {}) {
  return plan_footprint_bytes(m, plan, mm, m.infer_input_shapes(mm.batch), m.infer_shapes(mm.batch));
}

template <typename T>
BudgetReport footprint_report(const ModelGraph<T>& m, const UpdatePlan& plan, const MemoryModel& mm = {}) {
  validate_plan(m, plan);
  const auto ins = m.infer_input_shapes(mm.batch);
  const auto outs = m.infer_shapes(mm.batch);
  auto sparse = detail::accumulate_footprint(m, plan, mm, ins, outs);
  auto dense = detail::accumulate_footprint(m, full_plan(m), mm, ins, outs);
  BudgetReport r;
  r.rows = std::move(sparse.rows);
  r.total_bytes = sparse.total;
  r.dense_total_bytes = dense.total;
  r.reduction_fraction =
      dense.total ? 1.0 - static_cast<double>(sparse.total) / static_cast<double>(dense.total) : 0.0;
  r.feature_bytes = sparse.feature;
  r.dense_feature_bytes = dense.feature;
  r.feature_reduction =
      dense.feature ? 1.0 - static_cast<double>(sparse.feature) / static_cast<double>(dense.feature) : 0.0;
  r.workspace_bytes = sparse.workspace;
  r.dense_workspace_bytes = dense.workspace;

  std::size_t conv_total = 0, conv_updated = 0, params_updated = 0;
  for (const auto& n : m.nodes) {
    if (!has_weights(n.kind)) continue;
    const bool conv = n.kind != LayerKind::Linear;
    if (conv) conv_total += n.weight.size();
    if (!plan.trainable(n.id)) continue;
    if (conv) ++r.trainable_backbone_layers;
    const auto& sel = plan.selected(n.id);
    const std::size_t cout = n.out_channels();
    std::size_t live = 0;
    for (std::size_t i = 0; i < n.weight.size(); ++i)
      if (!n.masked(i) && std::binary_search(sel.begin(), sel.end(), static_cast<int>(i % cout))) ++live;
    if (conv) conv_updated += live;
    params_updated += live + (n.bias.empty() ? 0 : sel.size());
  }
  r.updated_conv_weight_fraction = conv_total ? static_cast<double>(conv_updated) / static_cast<double>(conv_total) : 0.0;
  const auto params = m.param_count();
  r.updated_param_fraction = params ? static_cast<double>(params_updated) / static_cast<double>(params) : 0.0;
  return r;
}

inline void write_budget_csv(std::ostream& os, const BudgetReport& r) {
  os << "node,name,kind,activation_bytes,weight_grad_bytes,bias_grad_bytes,mask_bytes,total_bytes\n";
  for (const auto& row : r.rows)
    os << row.node << ',' << row.name << ',' << kind_name(row.kind) << ',' << row.bytes.activation_bytes << ','
       << row.bytes.weight_grad_bytes << ',' << row.bytes.bias_grad_bytes << ',' << row.bytes.mask_bytes << ','
       << row.bytes.total() << '\n';
}

inline void print_budget_table(std::ostream& os, const BudgetReport& r, std::size_t budget = 0) {
  char line[256];
  std::snprintf(line, sizeof line, "%-5s %-24s %-10s %12s %12s %10s %10s %12s\n", "node", "name", "kind", "activations",
                "weight_grad", "bias_grad", "relu_mask", "total");
  os << line;
  for (const auto& row : r.rows) {
    std::snprintf(line, sizeof line, "%-5d %-24s %-10s %12zu %12zu %10zu %10zu %12zu\n", row.node,
                  row.name.substr(0, 24).c_str(), kind_name(row.kind), row.bytes.activation_bytes,
                  row.bytes.weight_grad_bytes, row.bytes.bias_grad_bytes, row.bytes.mask_bytes, row.bytes.total());
    os << line;
  }
  os << "total extra bytes        " << r.total_bytes;
  if (budget) os << " (budget " << budget << ")";
  os << "\ndense fine-tune bytes    " << r.dense_total_bytes << "\nreduction                " << r.reduction_fraction
     << "\nfeature bytes            " << r.feature_bytes << " (dense " << r.dense_feature_bytes
     << ")\nfeature reduction        " << r.feature_reduction << "\ngrad workspace (excluded) " << r.workspace_bytes
     << "\ntrainable conv layers    " << r.trainable_backbone_layers << "\nupdated conv weights     "
     << r.updated_conv_weight_fraction << "\nupdated params           " << r.updated_param_fraction << '\n';
}

}  // namespace spu
