#pragma once

// Everything in one include.

#include "ddg/analysis.hpp"
#include "ddg/config.hpp"
#include "ddg/datagen.hpp"
#include "ddg/dynamic_conv.hpp"
#include "ddg/error.hpp"
#include "ddg/harness.hpp"
#include "ddg/network.hpp"
#include "ddg/ops.hpp"
#include "ddg/rng.hpp"
#include "ddg/runtime.hpp"
#include "ddg/serialize.hpp"
#include "ddg/tape.hpp"
#include "ddg/tensor.hpp"
#include "ddg/text.hpp"
