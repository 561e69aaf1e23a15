// Umbrella header: the whole library in one include.
#pragma once

#include "bmoe/analysis.hpp"
#include "bmoe/butterfly.hpp"
#include "bmoe/checkpoint.hpp"
#include "bmoe/config.hpp"
#include "bmoe/counters.hpp"
#include "bmoe/errors.hpp"
#include "bmoe/io.hpp"
#include "bmoe/model.hpp"
#include "bmoe/moe.hpp"
#include "bmoe/ops.hpp"
#include "bmoe/rng.hpp"
#include "bmoe/tasks.hpp"
#include "bmoe/tensor.hpp"
#include "bmoe/ternary.hpp"
