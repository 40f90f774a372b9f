// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "spu/cli/commands.hpp"
#include "spu/cli/run_config.hpp"
