// SPDX-License-Identifier: Apache-2.0
//
// How much of a layer the dynamic stage touches: the fraction of output
// channels selected at least once over k independent draws of s channels.
#pragma once

#include <cmath>

#include "spu/planner/schedule.hpp"

namespace spu {

/// 1 - (1 - s/C)^k with s = ceil(r * C). k = 0 means only the initial plan: s/C.
inline double dynamic_coverage(double r, std::int64_t k, std::size_t cout) {
  require(r > 0.0 && r <= 1.0, "dynamic_coverage: ratio must be in (0, 1]");
  require(k >= 0, "dynamic_coverage: k must be non-negative");
  require(cout > 0, "dynamic_coverage: Cout must be positive");
  const double frac = static_cast<double>(channels_for_ratio(r, cout)) / static_cast<double>(cout);
  if (k == 0) return frac;
  return 1.0 - std::pow(1.0 - frac, static_cast<double>(k));
}

/// Standard deviation of the coverage fraction of a single run. Channel
/// indicators are exchangeable but not independent; the pairwise term uses the
/// probability that two given channels are both missed by one draw.
inline double coverage_stddev(std::size_t cout, std::size_t s, std::int64_t k) {
  const double c = static_cast<double>(cout);
  if (k == 0 || cout < 2) return 0.0;
  const double kk = static_cast<double>(k);
  const double q = 1.0 - static_cast<double>(s) / c;
  const double p2 = (c - static_cast<double>(s)) * (c - static_cast<double>(s) - 1.0) / (c * (c - 1.0));
  const double qk = std::pow(q, kk);
  const double var_count = c * qk * (1.0 - qk) + c * (c - 1.0) * (std::pow(p2, kk) - qk * qk);
  return std::sqrt(std::max(var_count, 0.0)) / c;
}

/// Fraction of `cout` channels selected by at least one of k draws made with the
/// same routine the schedule uses.
inline double empirical_coverage(double r, std::int64_t k, std::size_t cout, std::uint64_t seed) {
  const std::size_t s = channels_for_ratio(r, cout);
  if (k == 0) return static_cast<double>(s) / static_cast<double>(cout);
  Rng rng(substream_seed(seed, "coverage"));
  std::vector<bool> seen(cout, false);
  for (std::int64_t i = 0; i < k; ++i)
    for (int c : redraw_channels(rng, cout, s)) seen[static_cast<std::size_t>(c)] = true;
  const auto hit = static_cast<double>(std::count(seen.begin(), seen.end(), true));
  return hit / static_cast<double>(cout);
}

/// Union coverage of one layer across a sequence of plans.
inline double plan_coverage(const std::vector<UpdatePlan>& plans, int layer, std::size_t cout) {
  std::vector<bool> seen(cout, false);
  for (const auto& p : plans)
    if (p.trainable(layer))
      for (int c : p.selected(layer)) seen[static_cast<std::size_t>(c)] = true;
  return static_cast<double>(std::count(seen.begin(), seen.end(), true)) / static_cast<double>(cout);
}

}  // namespace spu
