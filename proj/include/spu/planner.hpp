// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "spu/planner/coverage.hpp"
#include "spu/planner/memory_model.hpp"
#include "spu/planner/plan_io.hpp"
#include "spu/planner/realloc.hpp"
#include "spu/planner/schedule.hpp"
#include "spu/planner/selection.hpp"
