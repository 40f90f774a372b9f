// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sstream>

#include "spu/engine.hpp"
#include "spu/pruner.hpp"
#include "suites/pruning.hpp"
#include "test_util.hpp"

using namespace spu;
using spu::testing::random_tensor;

namespace {

bool has_member(const DependencyGroup& g, int node, ChannelAxis axis) {
  return std::find(g.members.begin(), g.members.end(), GroupMember{node, axis}) != g.members.end();
}

const DependencyGroup* group_with(const std::vector<DependencyGroup>& gs, int node, ChannelAxis axis) {
  for (const auto& g : gs)
    if (has_member(g, node, axis)) return &g;
  return nullptr;
}

ModelGraph<double> inverted_block_model() {
  ModelBuilder<double> b({6, 6, 3}, 11);
  int x = b.conv_gn(kModelInput, 3, 8, 3, 1, true, "stem");
  x = inverted_residual(b, x, 8, 8, 1, 3, "block");
  x = b.conv_gn(x, 8, 16, 1, 1, true, "head");
  x = b.add_avgpool(x);
  x = b.add_flatten(x);
  b.add_linear(x, 16, 4, true, "classifier");
  return std::move(b).build(4);
}

int node_named(const ModelGraph<double>& m, const std::string& name) {
  for (const auto& n : m.nodes)
    if (n.name == name) return n.id;
  return -1;
}

}  // namespace

TEST(Dependency, ConvGroupNormConvChain) {
  ModelBuilder<float> b({5, 5, 3}, 1);
  int c1 = b.add_conv(kModelInput, 3, 16, 3, 1, 1, false, "conv1");
  int gn = b.add_groupnorm(c1, 16);
  int r = b.add_relu(gn);
  int c2 = b.add_conv(r, 16, 32, 3, 1, 1, false, "conv2");
  int x = b.add_avgpool(c2);
  x = b.add_flatten(x);
  int fc = b.add_linear(x, 32, 2, true);
  auto m = std::move(b).build(2);
  auto gs = build_dependency_groups(m);
  ASSERT_EQ(gs.size(), 2u);
  EXPECT_EQ(gs[0].channels, 16u);
  EXPECT_EQ(gs[0].members, (std::vector<GroupMember>{{c1, ChannelAxis::Out}, {gn, ChannelAxis::Channel},
                                                     {c2, ChannelAxis::In}}));
  EXPECT_EQ(gs[1].channels, 32u);
  EXPECT_EQ(gs[1].members, (std::vector<GroupMember>{{c2, ChannelAxis::Out}, {fc, ChannelAxis::In}}));
  // The input and classifier output axes never appear.
  EXPECT_EQ(group_with(gs, c1, ChannelAxis::In), nullptr);
  EXPECT_EQ(group_with(gs, fc, ChannelAxis::Out), nullptr);
}

TEST(Dependency, InvertedResidualCouplesSkipAxes) {
  auto m = inverted_block_model();
  auto gs = build_dependency_groups(m);
  const int stem = node_named(m, "stem"), expand = node_named(m, "block.expand");
  const int dw = node_named(m, "block.dw"), project = node_named(m, "block.project");
  const int add = node_named(m, "block.add"), head = node_named(m, "head");
  ASSERT_GE(stem, 0);
  ASSERT_GE(dw, 0);
  ASSERT_GE(add, 0);
  const auto* hidden = group_with(gs, expand, ChannelAxis::Out);
  ASSERT_NE(hidden, nullptr);
  EXPECT_EQ(hidden->channels, 24u);
  EXPECT_TRUE(has_member(*hidden, dw, ChannelAxis::Channel));
  EXPECT_TRUE(has_member(*hidden, project, ChannelAxis::In));
  EXPECT_FALSE(has_member(*hidden, stem, ChannelAxis::Out));

  const auto* skip = group_with(gs, stem, ChannelAxis::Out);
  ASSERT_NE(skip, nullptr);
  EXPECT_EQ(skip->channels, 8u);
  EXPECT_TRUE(has_member(*skip, project, ChannelAxis::Out));
  EXPECT_TRUE(has_member(*skip, add, ChannelAxis::Channel));
  EXPECT_TRUE(has_member(*skip, expand, ChannelAxis::In));
  EXPECT_TRUE(has_member(*skip, head, ChannelAxis::In));

  // Groups partition the prunable axes: no member appears twice.
  std::size_t total = 0;
  for (const auto& g : gs) total += g.members.size();
  std::vector<GroupMember> all;
  for (const auto& g : gs) all.insert(all.end(), g.members.begin(), g.members.end());
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = i + 1; j < all.size(); ++j) EXPECT_FALSE(all[i] == all[j]);
  EXPECT_EQ(total, all.size());
}

TEST(Dependency, NoPrunableConvGivesNoGroups) {
  ModelBuilder<float> b({2, 2, 3}, 1);
  int x = b.add_flatten(kModelInput);
  b.add_linear(x, 12, 5, true);
  auto m = std::move(b).build(5);
  EXPECT_TRUE(build_dependency_groups(m).empty());
}

TEST(Dependency, ResidualChannelMismatchIsRejected) {
  ModelBuilder<float> b({4, 4, 3}, 1);
  int a = b.add_conv(kModelInput, 3, 4, 1, 1, 0, false);
  int c = b.add_conv(kModelInput, 3, 4, 1, 1, 0, false);
  b.add_residual(a, c);
  auto m = std::move(b).build(0);
  m[1].weight = Tensor<float>({1, 1, 3, 5});
  EXPECT_THROW(build_dependency_groups(m), std::invalid_argument);
}

TEST(ChannelPrune, KeepAllIsIdentity) {
  auto m = inverted_block_model();
  auto p = channel_prune(m, 1.0);
  ASSERT_EQ(p.size(), m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_EQ(p[i].weight, m[i].weight);
    EXPECT_EQ(p[i].bias, m[i].bias);
    EXPECT_EQ(p[i].gamma, m[i].gamma);
  }
}

TEST(ChannelPrune, LowestNormChannelsRemoved) {
  ModelBuilder<float> b({1, 1, 1}, 1);
  int c = b.add_conv(kModelInput, 1, 4, 1, 1, 0, false);
  int x = b.add_avgpool(c);
  x = b.add_flatten(x);
  b.add_linear(x, 4, 2, false);
  auto m = std::move(b).build(2);
  const float norms[] = {0.1f, 5.0f, 3.0f, 0.2f};
  for (int k = 0; k < 4; ++k) m[0].weight[static_cast<std::size_t>(k)] = norms[k];
  for (auto& v : m[3].weight.vec()) v = 0.0f;
  auto [p, res] = channel_prune_detailed(m, 0.5);
  ASSERT_EQ(res.kept.size(), 1u);
  EXPECT_EQ(res.kept[0], (ChannelSet{1, 2}));
  EXPECT_EQ(p[0].weight.vec(), (std::vector<float>{5.0f, 3.0f}));
  EXPECT_EQ(p[3].weight.shape(), Shape({2, 2}));
}

TEST(ChannelPrune, ParamCountMatchesSurvivingShapes) {
  auto m = make_mobilenet_v2<float>(16, 5, 3, 0.35);
  auto [p, res] = channel_prune_detailed(m, 0.6);
  std::size_t count = 0;
  for (const auto& n : p.nodes) {
    std::size_t w = 1;
    for (auto d : n.weight.shape()) w *= d;
    if (n.weight.shape().empty()) w = 0;
    count += w + n.bias.size() + n.gamma.size() + n.beta.size();
  }
  EXPECT_EQ(count, p.param_count());
  EXPECT_EQ(res.params_after, count);
  EXPECT_LT(res.params_after, res.params_before);
  EXPECT_NEAR(res.removed_fraction() + res.kept_fraction(), 1.0, 1e-12);
  for (std::size_t g = 0; g < res.groups.size(); ++g)
    EXPECT_EQ(res.kept[g].size(), channels_for_ratio(0.6, res.groups[g].channels));
  EXPECT_THROW(channel_prune(m, 0.0), std::invalid_argument);
  EXPECT_THROW(channel_prune(m, 1.2), std::invalid_argument);
}

TEST(ChannelPrune, MembersKeepIdenticalIndexSets) {
  // Tag every coupled slice with its channel index and check the survivors.
  auto m = inverted_block_model();
  auto gs = build_dependency_groups(m);
  for (const auto& g : gs)
    for (const auto& mem : g.members) {
      auto& n = m[static_cast<std::size_t>(mem.node)];
      if (n.kind == LayerKind::GroupNorm && mem.axis == ChannelAxis::Channel)
        for (std::size_t c = 0; c < n.gamma.size(); ++c) n.mean[c] = static_cast<double>(c);
    }
  auto [p, res] = channel_prune_detailed(m, 0.5);
  for (std::size_t gi = 0; gi < res.groups.size(); ++gi)
    for (const auto& mem : res.groups[gi].members) {
      const auto& n = p[static_cast<std::size_t>(mem.node)];
      if (n.kind != LayerKind::GroupNorm) continue;
      ASSERT_EQ(n.mean.size(), res.kept[gi].size());
      for (std::size_t k = 0; k < n.mean.size(); ++k) EXPECT_EQ(n.mean[k], static_cast<double>(res.kept[gi][k]));
    }
  // Kernel slices: compare the pruned conv against a direct gather of the original.
  const int project = node_named(m, "block.project");
  const auto* hidden = group_with(res.groups, project, ChannelAxis::In);
  const auto* skip = group_with(res.groups, project, ChannelAxis::Out);
  const auto gi_h = static_cast<std::size_t>(hidden - res.groups.data());
  const auto gi_s = static_cast<std::size_t>(skip - res.groups.data());
  const auto& before = m[static_cast<std::size_t>(project)].weight;
  const auto& after = p[static_cast<std::size_t>(project)].weight;
  for (std::size_t a = 0; a < res.kept[gi_h].size(); ++a)
    for (std::size_t b = 0; b < res.kept[gi_s].size(); ++b)
      EXPECT_EQ(after.at(0, 0, a, b), before.at(0, 0, static_cast<std::size_t>(res.kept[gi_h][a]),
                                                static_cast<std::size_t>(res.kept[gi_s][b])));
}

TEST(ChannelPrune, PreservesFunctionWhenPrunedSlicesAreZero) {
  Rng rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    auto m = make_mobilenet_v2<double>(16, 4, rng.next_u64(), 0.35);
    for (auto& n : m.nodes)
      for (std::size_t c = 0; c < n.gamma.size(); ++c) {
        n.gamma[c] = rng.uniform(0.5, 1.5);
        n.beta[c] = rng.normal() * 0.2;
      }
    const double keep = 0.5;
    auto gs = build_dependency_groups(m);
    for (const auto& g : gs) {
      auto drop = rng.sample_without_replacement(static_cast<int>(g.channels),
                                                 static_cast<int>(g.channels - channels_for_ratio(keep, g.channels)));
      for (const auto& mem : g.members) {
        auto& n = m[static_cast<std::size_t>(mem.node)];
        for (int c : drop) {
          const auto cc = static_cast<std::size_t>(c);
          switch (n.kind) {
            case LayerKind::GroupNorm: n.gamma[cc] = n.beta[cc] = 0.0; break;
            case LayerKind::DepthwiseConv2d:
              for (std::size_t i = cc; i < n.weight.size(); i += n.out_channels()) n.weight[i] = 0.0;
              if (!n.bias.empty()) n.bias[cc] = 0.0;
              break;
            case LayerKind::Conv2d:
            case LayerKind::Linear: {
              const std::size_t cout = n.out_channels(), cin = n.in_channels();
              for (std::size_t i = 0; i < n.weight.size(); ++i)
                if ((mem.axis == ChannelAxis::Out ? i % cout : (i / cout) % cin) == cc) n.weight[i] = 0.0;
              if (mem.axis == ChannelAxis::Out && !n.bias.empty()) n.bias[cc] = 0.0;
              break;
            }
            default: break;
          }
        }
      }
    }
    auto p = channel_prune(m, keep);
    EXPECT_LT(p.param_count(), m.param_count());
    const BlockPruneConfig plain{2, 0.0};
    for (int k = 0; k < 3; ++k) {
      auto x = random_tensor<double>({1, 16, 16, 3}, rng);
      auto a = predict(m, x, plain);
      auto b = predict(p, x, plain);
      ASSERT_EQ(a.shape(), b.shape());
      for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
    }
  }
}

TEST(Sparsity, EqualLayersGetEqualSparsity) {
  ModelBuilder<float> b({4, 4, 8}, 1);
  int x = b.add_conv(kModelInput, 8, 8, 1, 1, 0, false);
  x = b.add_conv(x, 8, 8, 1, 1, 0, false);
  auto m = std::move(b).build(0);
  for (std::size_t i = 0; i < 64; ++i) m[0].weight[i] = m[1].weight[i] = (i % 2 ? 0.3f : -0.3f);
  auto prof = assign_layer_sparsity(m, 0.5);
  ASSERT_EQ(prof.layers.size(), 2u);
  EXPECT_EQ(prof.layers[0].sparsity, prof.layers[1].sparsity);
  EXPECT_NEAR(prof.achieved, 0.5, prof.quantum);
}

TEST(Sparsity, SmallerMeanMagnitudeIsPrunedMore) {
  ModelBuilder<float> b({4, 4, 16}, 1);
  int x = b.add_conv(kModelInput, 16, 16, 1, 1, 0, false);
  x = b.add_conv(x, 16, 16, 1, 1, 0, false);
  auto m = std::move(b).build(0);
  for (std::size_t i = 0; i < 256; ++i) {
    m[0].weight[i] = i % 3 ? 0.5f : -0.5f;
    m[1].weight[i] = i % 3 ? 0.1f : -0.1f;
  }
  auto prof = assign_layer_sparsity(m, 0.5);
  EXPECT_GT(prof.find(1)->sparsity, prof.find(0)->sparsity);
  EXPECT_NEAR(prof.achieved, 0.5, prof.quantum);
}

TEST(Sparsity, ToyModelReachesNinetyTwoPercent) {
  auto m = make_toy_cnn<float>(8, 3, {16, 32, 32, 64}, {1, 2, 1, 2}, 10, 42);
  auto prof = assign_layer_sparsity(m, 0.92);
  EXPECT_NEAR(prof.achieved, 0.92, prof.quantum);
  // Monotone in mean |w|.
  for (const auto& a : prof.layers)
    for (const auto& b : prof.layers)
      if (!a.fixed && !b.fixed && a.mean_abs > b.mean_abs) {
          EXPECT_LE(a.sparsity, b.sparsity + 1e-12);
        }
  auto p = pattern_prune(m, prof);
  std::size_t zeros = 0, total = 0;
  for (const auto& l : prof.layers) {
    const auto& n = p[static_cast<std::size_t>(l.node)];
    std::size_t z = 0;
    for (std::size_t i = 0; i < n.weight.size(); ++i) z += n.weight[i] == 0.0f;
    EXPECT_EQ(z, l.zeros());
    zeros += z;
    total += n.weight.size();
  }
  EXPECT_NEAR(static_cast<double>(zeros) / static_cast<double>(total), 0.92, prof.quantum);
}

TEST(Sparsity, RandomModelsAreMonotoneAndNearTarget) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto m = make_mobilenet_v2<float>(16, 3, rng.next_u64(), 0.35 + 0.15 * static_cast<double>(trial % 3));
    const double target = rng.uniform(0.7, 0.95);
    auto prof = assign_layer_sparsity(m, target);
    EXPECT_NEAR(prof.achieved, target, prof.quantum) << "trial " << trial;
    for (const auto& a : prof.layers)
      for (const auto& b : prof.layers)
        if (!a.fixed && !b.fixed && a.mean_abs > b.mean_abs) {
          EXPECT_LE(a.sparsity, b.sparsity + 1e-12);
        }
  }
}

TEST(Sparsity, InfeasibleTargetThrows) {
  auto m = make_toy_cnn<float>(8, 3, {8, 8}, {1, 1}, 3, 1);
  EXPECT_THROW(assign_layer_sparsity(m, 0.1), SparsityError);  // below the pattern floor
  EXPECT_THROW(assign_layer_sparsity(m, 1.0), std::invalid_argument);
}

TEST(PatternPrune, KeepsLargestFourWhenTheyFormAPattern) {
  ModelBuilder<float> b({3, 3, 1}, 1);
  b.add_conv(kModelInput, 1, 1, 3, 1, 1, false);
  auto m = std::move(b).build(0);
  const float w[9] = {0.1f, 0.9f, 0.2f, 0.05f, 1.0f, 0.8f, 0.15f, 0.7f, 0.3f};  // {1,4,5,7} largest
  for (int i = 0; i < 9; ++i) m[0].weight[static_cast<std::size_t>(i)] = w[i];
  SparsityProfile prof;
  LayerSparsity l;
  l.node = 0;
  l.pattern = true;
  l.weights = 9;
  l.filters = 1;
  l.kernels_per_filter = 1;
  l.taps = 9;
  l.kept_taps = 4;
  prof.layers.push_back(l);
  auto p = pattern_prune(m, prof);
  for (int i = 0; i < 9; ++i) {
    const bool keep = i == 1 || i == 4 || i == 5 || i == 7;
    EXPECT_EQ(p[0].weight[static_cast<std::size_t>(i)], keep ? w[i] : 0.0f) << i;
    EXPECT_EQ(p[0].mask[static_cast<std::size_t>(i)], keep ? 1 : 0);
  }
  // Uniform kernel: first library pattern.
  for (auto& v : m[0].weight.vec()) v = 1.0f;
  p = pattern_prune(m, prof);
  const auto first = PatternLibrary::default_3x3()[0];
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(p[0].mask[i], first.keeps(i) ? 1 : 0);
}

TEST(PatternPrune, FiltersEqualAndMagnitudesNeverGrow) {
  auto m = make_mobilenet_v2<float>(16, 3, 5, 0.5);
  auto prof = assign_layer_sparsity(m, 0.85);
  auto p = pattern_prune(m, prof);
  for (const auto& l : prof.layers) {
    const auto& n = p[static_cast<std::size_t>(l.node)];
    const auto& o = m[static_cast<std::size_t>(l.node)];
    const std::size_t cout = n.out_channels();
    std::vector<std::size_t> per(cout, 0);
    for (std::size_t i = 0; i < n.weight.size(); ++i) {
      EXPECT_LE(std::abs(n.weight[i]), std::abs(o.weight[i]));
      if (n.weight[i] == 0.0f) ++per[i % cout];
    }
    for (auto z : per) EXPECT_EQ(z, per[0]);
    EXPECT_EQ(per[0] * cout, l.zeros());
  }
  // Layers outside the profile are untouched.
  for (const auto& n : m.nodes)
    if (!prof.find(n.id)) {
      EXPECT_EQ(p[static_cast<std::size_t>(n.id)].weight, n.weight);
      EXPECT_EQ(p[static_cast<std::size_t>(n.id)].mask, n.mask);
    }
}

TEST(PatternPrune, MissingProfileLayerThrows) {
  auto m = make_toy_cnn<float>(8, 3, {8, 8}, {1, 1}, 3, 1);
  auto prof = assign_layer_sparsity(m, 0.8);
  prof.layers.pop_back();
  EXPECT_THROW(pattern_prune(m, prof), std::invalid_argument);
}

TEST(SparsityReport, DenseModelFlopsMatchClosedForm) {
  auto m = make_toy_cnn<float>(8, 3, {4, 6}, {1, 2}, 3, 1);
  auto r = sparsity_report(m);
  EXPECT_EQ(r.zeros, 0u);
  EXPECT_DOUBLE_EQ(r.sparsity, 0.0);
  // conv 3x3 3->4 on 8x8, conv 3x3 4->6 stride 2 -> 4x4, linear 6->3.
  const std::size_t want = 8 * 8 * 9 * 3 * 4 + 4 * 4 * 9 * 4 * 6 + 6 * 3;
  EXPECT_EQ(r.flops, want);
  EXPECT_EQ(r.sparse_flops, want);
}

TEST(SparsityReport, HalfMaskedKernels) {
  auto m = make_toy_cnn<float>(8, 3, {4, 6}, {1, 2}, 3, 1);
  for (auto& n : m.nodes) {
    if (!has_weights(n.kind)) continue;
    n.mask.assign(n.weight.size(), 1);
    for (std::size_t i = 0; i < n.weight.size(); i += 2) n.mask[i] = 0;
    n.apply_mask();
  }
  // Every layer has an even weight count, so exactly half is masked.
  auto r = sparsity_report(m);
  EXPECT_DOUBLE_EQ(r.sparsity, 0.5);
  std::ostringstream os;
  write_sparsity_csv(os, r);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "layer,kind,params,zeros,sparsity,flops,sparse_flops");
}

TEST(SparsityReport, InvertedResidualBlockHandCount) {
  auto m = inverted_block_model();
  auto r = sparsity_report(m);
  // stem 3x3 3->8 on 6x6; expand 1x1 8->24; dw 3x3 x24; project 1x1 24->8;
  // head 1x1 8->16; classifier 16->4.
  const std::size_t want = 36 * 9 * 3 * 8 + 36 * 8 * 24 + 36 * 9 * 24 + 36 * 24 * 8 + 36 * 8 * 16 + 16 * 4;
  EXPECT_EQ(r.flops, want);
}

TEST(Recipe, RoundTripAndValidation) {
  PruneRecipe r{0.7, 0.9, "default", 12};
  auto back = PruneRecipe::from_kv(KeyValueFile::parse(r.to_kv().to_string()));
  EXPECT_EQ(back.keep_ratio, 0.7);
  EXPECT_EQ(back.global_sparsity, 0.9);
  EXPECT_EQ(back.seed, 12u);
  auto bad = r.to_kv();
  bad.set("keep_ratio", 0.0);
  EXPECT_THROW(PruneRecipe::from_kv(bad), ConfigError);
  auto bad2 = r.to_kv();
  bad2.set("pattern_set", std::string("star"));
  EXPECT_THROW(PruneRecipe::from_kv(bad2), std::invalid_argument);

  auto m = make_mobilenet_v2<float>(16, 3, 2, 0.35);
  PruneOutcome o;
  auto p = run_prune_recipe(m, r, &o);
  EXPECT_TRUE(o.patterned);
  EXPECT_LT(p.param_count(), m.param_count());
  EXPECT_EQ(sparsity_report(p).zeros, o.profile.total_zeros());
}

TEST(ChannelPrune, RandomGraphsSliceEveryMemberAlike) {
  const auto r = suites::channel_group_consistency(30, 17);
  EXPECT_EQ(r.models, 30);
  EXPECT_GT(r.groups, 30);
  EXPECT_EQ(r.slice_mismatches, 0);
  EXPECT_EQ(r.shape_failures, 0);
}

TEST(PatternPrune, CountedSparsityWithinOneQuantum) {
  for (double target : {0.6, 0.8, 0.92}) {
    const auto r = suites::pattern_target(target, 7);
    EXPECT_TRUE(r.ok()) << target << " got " << r.achieved << " quantum " << r.quantum;
  }
}

TEST(ReluBlockPrune, AllOrNothingOnRandomBlocks) {
  const auto r = suites::relu_block_property(20000, 0.15, 3);
  EXPECT_GE(r.blocks, 20000u);
  EXPECT_GT(r.dropped, r.blocks / 10);
  EXPECT_LT(r.dropped, r.blocks);
  EXPECT_EQ(r.violations, 0u);
}
