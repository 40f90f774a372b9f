// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "spu/pruner/channel_prune.hpp"
#include "spu/pruner/dependency.hpp"
#include "spu/pruner/pattern_prune.hpp"
#include "spu/pruner/patterns.hpp"
#include "spu/pruner/recipe.hpp"
#include "spu/pruner/report.hpp"
#include "spu/pruner/sparsity.hpp"
