// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "spu/trainer/fine_tune.hpp"
#include "spu/trainer/metrics.hpp"
#include "spu/trainer/optimizer.hpp"
