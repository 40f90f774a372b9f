// SPDX-License-Identifier: Apache-2.0
//
// Pruning recipe file:
//   keep_ratio = 0.75
//   global_sparsity = 0.92
//   pattern_set = default
//   seed = 0
// global_sparsity = 0 skips pattern pruning.
#pragma once

#include "spu/kvfile.hpp"
#include "spu/pruner/channel_prune.hpp"
#include "spu/pruner/pattern_prune.hpp"

namespace spu {

struct PruneRecipe {
  double keep_ratio = 1.0;
  double global_sparsity = 0.0;
  std::string pattern_set = "default";
  std::uint64_t seed = 0;

  KeyValueFile to_kv() const {
    KeyValueFile f;
    f.set("keep_ratio", keep_ratio);
    f.set("global_sparsity", global_sparsity);
    f.set("pattern_set", pattern_set);
    f.set("seed", seed);
    return f;
  }
  static PruneRecipe from_kv(const KeyValueFile& f) {
    PruneRecipe r;
    r.keep_ratio = f.get_number_or("keep_ratio", r.keep_ratio);
    r.global_sparsity = f.get_number_or("global_sparsity", r.global_sparsity);
    r.pattern_set = f.get_or("pattern_set", r.pattern_set);
    r.seed = f.get_number_or("seed", r.seed);
    if (!(r.keep_ratio > 0.0 && r.keep_ratio <= 1.0)) throw ConfigError("keep_ratio", "keep_ratio must be in (0, 1]");
    if (!(r.global_sparsity >= 0.0 && r.global_sparsity < 1.0))
      throw ConfigError("global_sparsity", "global_sparsity must be in [0, 1)");
    PatternLibrary::by_name(r.pattern_set);
    return r;
  }
};

struct PruneOutcome {
  ChannelPruneResult channels;
  SparsityProfile profile;
  bool patterned = false;
};

/// Channel pruning, then (if requested) sparsity assignment and pattern pruning.
template <typename T>
ModelGraph<T> run_prune_recipe(const ModelGraph<T>& m, const PruneRecipe& r, PruneOutcome* outcome = nullptr) {
  auto [pruned, ch] = channel_prune_detailed(m, r.keep_ratio);
  PruneOutcome o;
  o.channels = std::move(ch);
  if (r.global_sparsity > 0.0) {
    const auto lib = PatternLibrary::by_name(r.pattern_set);
    o.profile = assign_layer_sparsity(pruned, r.global_sparsity, lib);
    pruned = pattern_prune(pruned, o.profile, lib);
    o.patterned = true;
  }
  if (outcome) *outcome = std::move(o);
  return pruned;
}

}  // namespace spu
