// SPDX-License-Identifier: Apache-2.0
//
// Weight sparsity and FLOP counts. One multiply-accumulate counts as one FLOP.
// Dense FLOPs count every kernel weight at every output position; sparse
// FLOPs count only nonzero weights.
#pragma once

#include <cstdio>
#include <ostream>

#include "spu/model.hpp"

namespace spu {

struct LayerSparsityStats {
  int node = 0;
  std::string name;
  LayerKind kind{};
  std::size_t params = 0;   // weights + bias
  std::size_t weights = 0;
  std::size_t zeros = 0;    // zero-valued or masked weights
  double sparsity = 0.0;    // zeros / weights
  std::size_t flops = 0;
  std::size_t sparse_flops = 0;
};

struct SparsityReport {
  std::vector<LayerSparsityStats> layers;
  std::size_t params = 0;  // every model parameter, including GroupNorm
  std::size_t weights = 0;
  std::size_t zeros = 0;
  double sparsity = 0.0;
  std::size_t flops = 0;
  std::size_t sparse_flops = 0;
};

template <typename T>
SparsityReport sparsity_report(const ModelGraph<T>& m) {
  const auto outs = m.infer_shapes(1);
  SparsityReport r;
  r.params = m.param_count();
  for (const auto& n : m.nodes) {
    if (!has_weights(n.kind)) continue;
    LayerSparsityStats s;
    s.node = n.id;
    s.name = n.name;
    s.kind = n.kind;
    s.weights = n.weight.size();
    s.params = s.weights + n.bias.size();
    for (std::size_t i = 0; i < n.weight.size(); ++i)
      if (n.masked(i) || n.weight[i] == T{0}) ++s.zeros;
    s.sparsity = s.weights ? static_cast<double>(s.zeros) / static_cast<double>(s.weights) : 0.0;
    const auto& o = outs[static_cast<std::size_t>(n.id)];
    const std::size_t positions = n.kind == LayerKind::Linear ? 1 : o[1] * o[2];
    s.flops = positions * s.weights;
    s.sparse_flops = positions * (s.weights - s.zeros);
    r.weights += s.weights;
    r.zeros += s.zeros;
    r.flops += s.flops;
    r.sparse_flops += s.sparse_flops;
    r.layers.push_back(std::move(s));
  }
  r.sparsity = r.weights ? static_cast<double>(r.zeros) / static_cast<double>(r.weights) : 0.0;
  return r;
}

inline void write_sparsity_csv(std::ostream& os, const SparsityReport& r) {
  os << "layer,kind,params,zeros,sparsity,flops,sparse_flops\n";
  char buf[64];
  std::size_t params = 0;  // column sum; GroupNorm parameters have no row
  for (const auto& s : r.layers) {
    params += s.params;
    std::snprintf(buf, sizeof buf, "%.6f", s.sparsity);
    os << s.name << ',' << kind_name(s.kind) << ',' << s.params << ',' << s.zeros << ',' << buf << ',' << s.flops
       << ',' << s.sparse_flops << '\n';
  }
  std::snprintf(buf, sizeof buf, "%.6f", r.sparsity);
  os << "total,all," << params << ',' << r.zeros << ',' << buf << ',' << r.flops << ',' << r.sparse_flops << '\n';
}

}  // namespace spu
