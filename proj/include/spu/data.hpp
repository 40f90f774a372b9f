// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "spu/data/cifar10.hpp"
#include "spu/data/dataset.hpp"
#include "spu/data/synth.hpp"
