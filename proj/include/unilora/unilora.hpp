// Copyright 2026 The unilora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "unilora/container.hpp"
#include "unilora/flow.hpp"
#include "unilora/harness.hpp"
#include "unilora/mixed_lora.hpp"
#include "unilora/model.hpp"
#include "unilora/model_config.hpp"
#include "unilora/rng.hpp"
#include "unilora/runtime.hpp"
#include "unilora/tensor.hpp"
#include "unilora/trainer.hpp"
#include "unilora/virtual_module.hpp"
