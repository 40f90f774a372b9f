// SPDX-License-Identifier: Apache-2.0
//
// Fixed -> dynamic -> fixed update schedule. Steps 1..j use the initial plan,
// steps j+1..j+k redraw each trainable layer's channels uniformly at random
// (every `reselect_every` steps), and steps after j+k keep the last draw.
#pragma once

#include <cstdint>
#include <stdexcept>

#include "spu/planner/selection.hpp"
#include "spu/random.hpp"

namespace spu {

struct ScheduleConfig {
  std::int64_t j = 0;  // early fixed steps
  std::int64_t k = 0;  // dynamic steps
  std::int64_t l = 0;  // late fixed steps
  std::uint64_t seed = 0;
  double ratio = 0.2;
  std::size_t budget = 256 * 1024;
  std::int64_t reselect_every = 1;

  std::int64_t total() const { return j + k + l; }
  void validate() const {
    require(j >= 0 && k >= 0 && l >= 0, "schedule: stage lengths must be non-negative");
    require(ratio > 0.0 && ratio <= 1.0, "schedule: ratio must be in (0, 1]");
    require(budget > 0, "schedule: budget must be positive");
    require(reselect_every >= 1, "schedule: reselect_every must be >= 1");
  }
};

/// Draws `count` distinct channels out of `cout`, sorted.
inline ChannelSet redraw_channels(Rng& rng, std::size_t cout, std::size_t count) {
  return rng.sample_without_replacement(static_cast<int>(cout), static_cast<int>(count));
}

class ScheduleState {
 public:
  ScheduleState() = default;

  template <typename T>
  ScheduleState(const ModelGraph<T>& m, ScheduleConfig cfg, const MemoryModel& mm = {})
      : ScheduleState(m, plan_selection(m, cfg.budget, cfg.ratio, mm), cfg) {}

  /// Starts from an explicit initial plan (used by the fixed baselines and tests).
  template <typename T>
  ScheduleState(const ModelGraph<T>& m, UpdatePlan initial, ScheduleConfig cfg)
      : cfg_(cfg), initial_(std::move(initial)), rng_(substream_seed(cfg.seed, "schedule")) {
    cfg_.validate();
    validate_plan(m, initial_);
    initial_.plan_id = 0;
    current_ = initial_;
    next_redraw_ = cfg_.j + 1;
    const int cls = m.classifier_id();
    for (int id : initial_.trainable_ids())
      if (id != cls) redraw_.push_back({id, m[static_cast<std::size_t>(id)].out_channels()});
  }

  const ScheduleConfig& config() const { return cfg_; }
  const UpdatePlan& initial_plan() const { return initial_; }
  const UpdatePlan& current() const { return current_; }
  std::int64_t last_step() const { return last_t_; }

  /// Plan in force at step t (1-based). Steps must be non-decreasing; redraw
  /// points skipped over are still drawn so the sequence depends only on the seed.
  const UpdatePlan& step(std::int64_t t) {
    if (t < 1 || t > cfg_.total())
      throw std::out_of_range("schedule step " + std::to_string(t) + " outside [1, " +
                              std::to_string(cfg_.total()) + "]");
    if (t < last_t_) throw std::invalid_argument("schedule steps must be non-decreasing");
    last_t_ = t;
    const std::int64_t dyn_end = cfg_.j + cfg_.k;
    const std::int64_t upto = std::min(t, dyn_end);
    while (next_redraw_ <= upto) {
      const std::int64_t next = next_redraw_;
      for (const auto& [id, cout] : redraw_) {
        auto& lp = current_.layers[static_cast<std::size_t>(id)];
        lp.selected = redraw_channels(rng_, cout, lp.selected.size());
      }
      current_.plan_id = next;
      next_redraw_ = next + cfg_.reselect_every;
    }
    return current_;
  }

 private:
  struct Redraw {
    int id;
    std::size_t cout;
  };
  ScheduleConfig cfg_;
  UpdatePlan initial_, current_;
  Rng rng_{0};
  std::vector<Redraw> redraw_;
  std::int64_t last_t_ = 0;
  std::int64_t next_redraw_ = 1;  // first dynamic step, j + 1
};

inline const UpdatePlan& schedule_step(ScheduleState& state, std::int64_t t) { return state.step(t); }

}  // namespace spu
