// SPDX-License-Identifier: Apache-2.0
//
// Plain SGD over compact (selected-channel) gradients. Velocity buffers exist
// only when momentum is nonzero.
#pragma once

#include <map>

#include "spu/engine.hpp"

namespace spu {

template <typename T>
struct OptimizerState {
  double lr = 0.1;
  double momentum = 0.0;
  // node id -> velocity for the full weight / bias. Empty when momentum == 0.
  std::map<int, std::pair<std::vector<T>, std::vector<T>>> velocity;

  std::size_t velocity_bytes() const {
    std::size_t b = 0;
    for (const auto& [id, v] : velocity) b += (v.first.size() + v.second.size()) * sizeof(T);
    return b;
  }
};

/// w <- w - lr * g on selected channels. Masked weights stay zero and every
/// other parameter is left untouched.
template <typename T>
void sgd_step(ModelGraph<T>& m, const Gradients<T>& grads, OptimizerState<T>& opt) {
  const T lr = static_cast<T>(opt.lr);
  const T mu = static_cast<T>(opt.momentum);
  for (const auto& pg : grads.params) {
    require(pg.node >= 0 && static_cast<std::size_t>(pg.node) < m.size(), "sgd_step: gradient for unknown node");
    auto& n = m[static_cast<std::size_t>(pg.node)];
    const std::size_t cout = n.out_channels();
    const std::size_t s = pg.selected.size();
    require(s > 0 && pg.weight.size() % s == 0 && pg.weight.size() / s == n.weight.size() / cout,
            "sgd_step: gradient shape " + shape_str(pg.weight.shape()) + " does not match node " +
                std::to_string(pg.node) + " weight " + shape_str(n.weight.shape()));
    require(pg.bias.empty() || (pg.bias.size() == s && n.bias.size() == cout), "sgd_step: bias gradient mismatch");
    std::vector<T>* vw = nullptr;
    std::vector<T>* vb = nullptr;
    if (opt.momentum != 0.0) {
      auto& v = opt.velocity[pg.node];
      if (v.first.empty()) v.first.assign(n.weight.size(), T{0});
      if (v.second.empty()) v.second.assign(n.bias.size(), T{0});
      vw = &v.first;
      vb = &v.second;
    }
    const std::size_t outer = pg.weight.size() / s;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t j = 0; j < s; ++j) {
        const std::size_t full = o * cout + static_cast<std::size_t>(pg.selected[j]);
        if (n.masked(full)) continue;
        T g = pg.weight[o * s + j];
        if (vw) g = (*vw)[full] = mu * (*vw)[full] + g;
        n.weight[full] -= lr * g;
      }
    for (std::size_t j = 0; j < pg.bias.size(); ++j) {
      const auto c = static_cast<std::size_t>(pg.selected[j]);
      T g = pg.bias[j];
      if (vb) g = (*vb)[c] = mu * (*vb)[c] + g;
      n.bias[c] -= lr * g;
    }
  }
}

}  // namespace spu
