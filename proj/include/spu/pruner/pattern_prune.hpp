// SPDX-License-Identifier: Apache-2.0
//
// Pattern pruning followed by connectivity pruning. Every kernel of a
// pattern-sized layer keeps the library pattern holding the most |w| mass;
// then each filter drops its `zero_kernels` lowest-norm kernels, so all
// filters of a layer end with the same zero count. Layers absent from the
// profile are left untouched.
#pragma once

#include "spu/pruner/sparsity.hpp"

namespace spu {

template <typename T>
ModelGraph<T> pattern_prune(const ModelGraph<T>& m, const SparsityProfile& prof,
                            const PatternLibrary& lib = PatternLibrary::default_3x3()) {
  for (const auto& n : m.nodes) {
    const bool needs = (n.kind == LayerKind::Conv2d && n.kernel_h() == lib.kernel_h() &&
                        n.kernel_w() == lib.kernel_w());
    if (needs && !prof.find(n.id))
      throw std::invalid_argument("pattern_prune: profile has no entry for node " + std::to_string(n.id) + " (" +
                                  n.name + ")");
  }
  ModelGraph<T> out = m;
  for (const auto& l : prof.layers) {
    require(l.node >= 0 && static_cast<std::size_t>(l.node) < out.size(), "pattern_prune: profile node out of range");
    auto& n = out[static_cast<std::size_t>(l.node)];
    require(n.weight.size() == l.weights, "pattern_prune: profile does not match node " + std::to_string(l.node));
    const std::size_t taps = n.kernel_h() * n.kernel_w();
    const std::size_t cout = n.out_channels();
    const std::size_t cin = n.kind == LayerKind::DepthwiseConv2d ? 1 : n.in_channels();
    // Weight index of tap p, input ci, output co (channel-last layouts).
    auto idx = [&](std::size_t p, std::size_t ci, std::size_t co) { return (p * cin + ci) * cout + co; };
    if (n.mask.empty()) n.mask.assign(n.weight.size(), 1);

    if (l.pattern) {
      for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t co = 0; co < cout; ++co) {
          std::array<double, 16> a{};
          for (std::size_t p = 0; p < taps; ++p)
            a[p] = n.masked(idx(p, ci, co)) ? 0.0 : std::abs(static_cast<double>(n.weight[idx(p, ci, co)]));
          const auto& pat = lib[lib.best_pattern(a)];
          for (std::size_t p = 0; p < taps; ++p)
            if (!pat.keeps(p)) n.mask[idx(p, ci, co)] = 0;
        }
    }
    if (l.zero_kernels > 0) {
      std::vector<double> norm(cin);
      std::vector<std::size_t> order(cin);
      for (std::size_t co = 0; co < cout; ++co) {
        for (std::size_t ci = 0; ci < cin; ++ci) {
          double s = 0.0;
          for (std::size_t p = 0; p < taps; ++p) {
            const auto i = idx(p, ci, co);
            if (!n.masked(i)) s += static_cast<double>(n.weight[i]) * static_cast<double>(n.weight[i]);
          }
          norm[ci] = s;
        }
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return norm[a] < norm[b]; });
        for (std::size_t k = 0; k < l.zero_kernels; ++k)
          for (std::size_t p = 0; p < taps; ++p) n.mask[idx(p, order[k], co)] = 0;
      }
    }
    n.apply_mask();
  }
  return out;
}

}  // namespace spu
