// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include "suites/gradcheck.hpp"

using namespace spu::suites;

TEST(GradCheck, ConvWeightsBiasAndInput) { EXPECT_LE(gradcheck_conv(20, 101).max_rel_err, 1e-4); }
TEST(GradCheck, DepthwiseWeightsAndInput) { EXPECT_LE(gradcheck_depthwise(20, 102).max_rel_err, 1e-4); }
TEST(GradCheck, LinearWeightsAndInput) { EXPECT_LE(gradcheck_linear(20, 103).max_rel_err, 1e-4); }
TEST(GradCheck, CrossEntropyLogits) { EXPECT_LE(gradcheck_loss(20, 104).max_rel_err, 1e-6); }
TEST(GradCheck, FrozenGroupNormIsPerChannelScale) { EXPECT_LE(gradcheck_groupnorm(20, 105).max_rel_err, 1e-4); }
TEST(GradCheck, BlockPrunedRelu) { EXPECT_LE(gradcheck_relu_block(20, 106).max_rel_err, 1e-4); }
TEST(GradCheck, ResidualModelEndToEnd) { EXPECT_LE(gradcheck_model(20, 107).max_rel_err, 1e-4); }
