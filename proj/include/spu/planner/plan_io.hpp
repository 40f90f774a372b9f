// SPDX-License-Identifier: Apache-2.0
//
// Plan files:
//   plan_id = 0
//   seed = 7
//   budget_bytes = 262144
//   ratio = 0.2
//   nodes = 160
//   layer.151 = 0,4,9,...
// Only trainable layers get a `layer.<id>` line.
#pragma once

#include <filesystem>
#include <sstream>

#include "spu/kvfile.hpp"
#include "spu/plan.hpp"

namespace spu {

struct PlanFileInfo {
  std::uint64_t seed = 0;
  std::size_t budget_bytes = 0;
  double ratio = 0.0;
};

inline KeyValueFile plan_to_kv(const UpdatePlan& plan, const PlanFileInfo& info) {
  KeyValueFile f;
  f.set("plan_id", plan.plan_id);
  f.set("seed", info.seed);
  f.set("budget_bytes", info.budget_bytes);
  f.set("ratio", info.ratio);
  f.set("nodes", plan.layers.size());
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    if (!plan.layers[i].trainable) continue;
    std::string list;
    for (int c : plan.layers[i].selected) {
      if (!list.empty()) list += ',';
      list += std::to_string(c);
    }
    f.set("layer." + std::to_string(i), list);
  }
  return f;
}

template <typename T>
UpdatePlan plan_from_kv(const ModelGraph<T>& m, const KeyValueFile& f, PlanFileInfo* info = nullptr) {
  const auto nodes = f.get_number<std::size_t>("nodes");
  if (nodes != m.size())
    throw ConfigError("nodes", "plan is for a model with " + std::to_string(nodes) + " nodes, model has " +
                                   std::to_string(m.size()));
  auto plan = empty_plan(m);
  plan.plan_id = f.get_number<std::int64_t>("plan_id");
  for (const auto& [key, value] : f.entries()) {
    if (key.rfind("layer.", 0) != 0) continue;
    const auto id = KeyValueFile::parse_number<int>(key, key.substr(6));
    if (id < 0 || static_cast<std::size_t>(id) >= m.size()) throw ConfigError(key, "plan names unknown node " + key);
    ChannelSet sel;
    std::istringstream is(value);
    std::string tok;
    while (std::getline(is, tok, ','))
      if (!tok.empty()) sel.push_back(KeyValueFile::parse_number<int>(key, tok));
    set_trainable(plan, m, id, std::move(sel));
  }
  validate_plan(m, plan);
  if (info) {
    info->seed = f.get_number_or<std::uint64_t>("seed", 0);
    info->budget_bytes = f.get_number_or<std::size_t>("budget_bytes", 0);
    info->ratio = f.get_number_or<double>("ratio", 0.0);
  }
  return plan;
}

inline void save_plan(const std::filesystem::path& path, const UpdatePlan& plan, const PlanFileInfo& info) {
  plan_to_kv(plan, info).save(path, "spu update plan");
}

template <typename T>
UpdatePlan load_plan(const std::filesystem::path& path, const ModelGraph<T>& m, PlanFileInfo* info = nullptr) {
  return plan_from_kv(m, KeyValueFile::load(path), info);
}

}  // namespace spu
