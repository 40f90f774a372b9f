// SPDX-License-Identifier: Apache-2.0
//
// Per-layer sparsity targets. Standard conv layers are ranked by mean |w|;
// the layer with the smallest mean gets the largest share of a linear ramp,
// the ramp is scaled so the overall zero fraction hits the global target, and
// each layer is then rounded onto the values it can actually realize:
//   kh x kw pattern layers: (Cin * (taps - m) + z * m) / (Cin * taps)
//   other conv layers:      z / Cin
// where z is the number of whole kernels removed from every filter
// (0 <= z < Cin). Depthwise layers with a pattern-sized kernel only get the
// pattern and keep a fixed share; they are outside the ramp.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>

#include "spu/model.hpp"
#include "spu/pruner/patterns.hpp"

namespace spu {

struct LayerSparsity {
  int node = 0;
  double mean_abs = 0.0;
  bool pattern = false;  // kernel matches the pattern library
  bool fixed = false;    // depthwise: pattern only, not part of the ramp
  std::size_t weights = 0;
  std::size_t filters = 0;             // Cout
  std::size_t kernels_per_filter = 0;  // Cin (1 for depthwise)
  std::size_t taps = 0;                // kh * kw
  std::size_t kept_taps = 0;           // taps left in a kernel that survives
  std::size_t zero_kernels = 0;        // z, kernels removed per filter
  double target = 0.0;                 // continuous ramp value
  double sparsity = 0.0;               // realized value

  std::size_t zeros_for(std::size_t z) const {
    return filters * (kernels_per_filter * (taps - kept_taps) + z * kept_taps);
  }
  std::size_t zeros() const { return zeros_for(zero_kernels); }
  std::size_t max_zero_kernels() const { return fixed ? 0 : kernels_per_filter - 1; }
};

struct SparsityProfile {
  std::vector<LayerSparsity> layers;  // in node order
  double global_target = 0.0;
  double achieved = 0.0;
  double quantum = 0.0;  // largest single-step change of the global fraction

  const LayerSparsity* find(int node) const {
    for (const auto& l : layers)
      if (l.node == node) return &l;
    return nullptr;
  }
  std::size_t total_weights() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weights;
    return n;
  }
  std::size_t total_zeros() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.zeros();
    return n;
  }
};

class SparsityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
SparsityProfile assign_layer_sparsity(const ModelGraph<T>& m, double global_target,
                                      const PatternLibrary& lib = PatternLibrary::default_3x3()) {
  require(global_target >= 0.0 && global_target < 1.0, "assign_layer_sparsity: target must be in [0, 1)");
  SparsityProfile prof;
  prof.global_target = global_target;
  for (const auto& n : m.nodes) {
    if (n.kind != LayerKind::Conv2d && n.kind != LayerKind::DepthwiseConv2d) continue;
    LayerSparsity l;
    l.node = n.id;
    l.pattern = n.kernel_h() == lib.kernel_h() && n.kernel_w() == lib.kernel_w();
    if (n.kind == LayerKind::DepthwiseConv2d && !l.pattern) continue;
    l.fixed = n.kind == LayerKind::DepthwiseConv2d;
    l.weights = n.weight.size();
    l.filters = n.out_channels();
    l.kernels_per_filter = l.fixed ? 1 : n.in_channels();
    l.taps = n.kernel_h() * n.kernel_w();
    l.kept_taps = l.pattern ? lib.kept_per_pattern() : l.taps;
    double s = 0.0;
    for (std::size_t i = 0; i < n.weight.size(); ++i) s += std::abs(static_cast<double>(n.weight[i]));
    l.mean_abs = l.weights ? s / static_cast<double>(l.weights) : 0.0;
    prof.layers.push_back(l);
  }
  auto& layers = prof.layers;
  const double total = static_cast<double>(prof.total_weights());
  if (layers.empty()) return prof;

  std::vector<std::size_t> ramp;
  double fixed_zeros = 0.0;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].fixed)
      fixed_zeros += static_cast<double>(layers[i].zeros());
    else
      ramp.push_back(i);
  }
  for (std::size_t i : ramp)
    prof.quantum = std::max(prof.quantum, static_cast<double>(layers[i].filters * layers[i].kept_taps) / total);

  // Descending mean |w|: least pruned first. Ties keep node order.
  std::stable_sort(ramp.begin(), ramp.end(), [&](std::size_t a, std::size_t b) {
    return layers[a].mean_abs > layers[b].mean_abs;
  });
  const std::size_t L = ramp.size();
  std::vector<double> w(L), lo(L), hi(L);
  for (std::size_t p = 0; p < L; ++p) {
    // Tied means share the average position.
    std::size_t b = p, e = p;
    while (b > 0 && layers[ramp[b - 1]].mean_abs == layers[ramp[p]].mean_abs) --b;
    while (e + 1 < L && layers[ramp[e + 1]].mean_abs == layers[ramp[p]].mean_abs) ++e;
    w[p] = (0.5 * static_cast<double>(b + e) + 1.0) / static_cast<double>(L);
    const auto& l = layers[ramp[p]];
    lo[p] = static_cast<double>(l.zeros_for(0)) / static_cast<double>(l.weights);
    hi[p] = static_cast<double>(l.zeros_for(l.max_zero_kernels())) / static_cast<double>(l.weights);
  }
  // Monotone envelopes: a layer may not go below any less-pruned layer's floor
  // nor above any more-pruned layer's ceiling.
  for (std::size_t p = 1; p < L; ++p) lo[p] = std::max(lo[p], lo[p - 1]);
  for (std::size_t p = L - 1; p-- > 0;) hi[p] = std::min(hi[p], hi[p + 1]);
  for (std::size_t p = 0; p < L; ++p)
    if (lo[p] > hi[p] + 1e-12)
      throw SparsityError("assign_layer_sparsity: layer granularities admit no monotone assignment");

  const double want = global_target * total - fixed_zeros;
  double min_z = 0.0, max_z = 0.0;
  for (std::size_t p = 0; p < L; ++p) {
    min_z += lo[p] * static_cast<double>(layers[ramp[p]].weights);
    max_z += hi[p] * static_cast<double>(layers[ramp[p]].weights);
  }
  const double slack = prof.quantum * total;
  if (want < min_z - slack || want > max_z + slack)
    throw SparsityError("assign_layer_sparsity: global target " + std::to_string(global_target) +
                        " is outside the reachable range [" + std::to_string((min_z + fixed_zeros) / total) + ", " +
                        std::to_string((max_z + fixed_zeros) / total) + "]");

  auto ramp_at = [&](double c, std::size_t p) { return std::clamp(c * w[p], lo[p], hi[p]); };
  auto zeros_at = [&](double c) {
    double z = 0.0;
    for (std::size_t p = 0; p < L; ++p) z += ramp_at(c, p) * static_cast<double>(layers[ramp[p]].weights);
    return z;
  };
  double c_lo = 0.0, c_hi = 1.0 / w[0] + 1.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (c_lo + c_hi);
    (zeros_at(mid) < want ? c_lo : c_hi) = mid;
  }
  for (std::size_t p = 0; p < L; ++p) layers[ramp[p]].target = ramp_at(c_hi, p);
  for (auto& l : layers)
    if (l.fixed) l.target = static_cast<double>(l.zeros()) / static_cast<double>(l.weights);

  // Smallest z whose realized value reaches v.
  auto z_ceil = [](const LayerSparsity& l, double v) {
    std::size_t z = 0;
    while (z < l.max_zero_kernels() &&
           static_cast<double>(l.zeros_for(z)) < v * static_cast<double>(l.weights) - 1e-9)
      ++z;
    return z;
  };
  auto value = [](const LayerSparsity& l, std::size_t z) {
    return static_cast<double>(l.zeros_for(z)) / static_cast<double>(l.weights);
  };
  // Round up along the chain so each layer is at least as sparse as the one before.
  double prev = 0.0;
  for (std::size_t p = 0; p < L; ++p) {
    auto& l = layers[ramp[p]];
    l.zero_kernels = z_ceil(l, std::max(l.target, prev));
    prev = value(l, l.zero_kernels);
  }
  // Trim the overshoot one kernel step at a time while it brings the total closer.
  auto current = [&] { return static_cast<double>(prof.total_zeros()); };
  const double goal = global_target * total;
  while (true) {
    const double err = current() - goal;
    if (err <= 0.0) break;
    std::vector<std::size_t> cand;
    for (std::size_t p = 0; p < L; ++p) {
      const auto& l = layers[ramp[p]];
      if (l.zero_kernels == 0) continue;
      const double lower = value(l, l.zero_kernels - 1);
      const double bound = p == 0 ? 0.0 : value(layers[ramp[p - 1]], layers[ramp[p - 1]].zero_kernels);
      if (lower + 1e-12 >= bound) cand.push_back(p);
    }
    std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) {
      const auto& la = layers[ramp[a]];
      const auto& lb = layers[ramp[b]];
      return value(la, la.zero_kernels) - la.target > value(lb, lb.zero_kernels) - lb.target;
    });
    bool moved = false;
    for (std::size_t p : cand) {
      auto& l = layers[ramp[p]];
      const double step = static_cast<double>(l.filters * l.kept_taps);
      if (std::abs(err - step) < err) {
        --l.zero_kernels;
        moved = true;
        break;
      }
    }
    if (!moved) break;
  }
  for (auto& l : layers) l.sparsity = value(l, l.zero_kernels);
  prof.achieved = current() / total;
  return prof;
}

}  // namespace spu
