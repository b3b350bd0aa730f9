// SPDX-License-Identifier: Apache-2.0
#pragma once

// Umbrella header: the whole library.

#include "dualrate/checkpoint.hpp"
#include "dualrate/common.hpp"
#include "dualrate/config.hpp"
#include "dualrate/data.hpp"
#include "dualrate/distill.hpp"
#include "dualrate/eval.hpp"
#include "dualrate/matrix.hpp"
#include "dualrate/models.hpp"
#include "dualrate/nnkit.hpp"
#include "dualrate/process.hpp"
#include "dualrate/rng.hpp"
#include "dualrate/runner.hpp"
#include "dualrate/sample.hpp"
#include "dualrate/schedule.hpp"
#include "dualrate/svg.hpp"
#include "dualrate/train.hpp"
