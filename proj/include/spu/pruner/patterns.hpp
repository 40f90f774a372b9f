// SPDX-License-Identifier: Apache-2.0
//
// Kernel patterns for 3x3 kernels. Positions are numbered r * 3 + c:
//   0 1 2
//   3 4 5
//   6 7 8
// Each pattern keeps the center and three other taps.
#pragma once

#include <array>
#include <bitset>
#include <string>
#include <vector>

#include "spu/tensor.hpp"

namespace spu {

struct KernelPattern {
  std::uint16_t bits = 0;  // bit p set = tap p kept
  bool keeps(std::size_t p) const { return (bits >> p) & 1u; }
  std::size_t count() const { return std::bitset<16>(bits).count(); }
};

class PatternLibrary {
 public:
  PatternLibrary() = default;
  PatternLibrary(std::size_t kh, std::size_t kw, std::vector<KernelPattern> patterns)
      : kh_(kh), kw_(kw), patterns_(std::move(patterns)) {
    require(!patterns_.empty(), "pattern library is empty");
    const auto m = patterns_.front().count();
    for (const auto& p : patterns_) {
      require(p.count() == m, "pattern library: patterns must keep the same number of taps");
      require(p.bits < (1u << (kh_ * kw_)), "pattern library: pattern outside kernel extent");
    }
  }

  /// Default library: four T shapes and four 2x2 squares, all through the center.
  static PatternLibrary default_3x3() {
    auto make = [](std::initializer_list<int> taps) {
      KernelPattern p;
      for (int t : taps) p.bits = static_cast<std::uint16_t>(p.bits | (1u << t));
      return p;
    };
    return PatternLibrary(3, 3,
                          {make({1, 3, 4, 5}), make({1, 4, 5, 7}), make({3, 4, 5, 7}), make({1, 3, 4, 7}),
                           make({0, 1, 3, 4}), make({1, 2, 4, 5}), make({3, 4, 6, 7}), make({4, 5, 7, 8})});
  }

  static PatternLibrary by_name(const std::string& name) {
    if (name == "default" || name == "center4") return default_3x3();
    throw std::invalid_argument("unknown pattern set '" + name + "'");
  }

  std::size_t kernel_h() const { return kh_; }
  std::size_t kernel_w() const { return kw_; }
  std::size_t taps() const { return kh_ * kw_; }
  std::size_t kept_per_pattern() const { return patterns_.front().count(); }
  const std::vector<KernelPattern>& patterns() const { return patterns_; }
  std::size_t size() const { return patterns_.size(); }
  const KernelPattern& operator[](std::size_t i) const { return patterns_[i]; }

  /// Pattern keeping the most |w| mass; ties go to the lower index.
  std::size_t best_pattern(const std::array<double, 16>& abs_w) const {
    std::size_t best = 0;
    double best_mass = -1.0;
    for (std::size_t i = 0; i < patterns_.size(); ++i) {
      double mass = 0.0;
      for (std::size_t p = 0; p < taps(); ++p)
        if (patterns_[i].keeps(p)) mass += abs_w[p];
      if (mass > best_mass) {
        best_mass = mass;
        best = i;
      }
    }
    return best;
  }

 private:
  std::size_t kh_ = 3, kw_ = 3;
  std::vector<KernelPattern> patterns_;
};

}  // namespace spu
