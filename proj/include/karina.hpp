#pragma once

// Umbrella header for the library (the CLI lives under karina/cli/).

#include "karina/engine/tensor.hpp"
#include "karina/engine/ops.hpp"
#include "karina/engine/conv.hpp"
#include "karina/engine/grad_check.hpp"
#include "karina/grid.hpp"
#include "karina/padding.hpp"
#include "karina/io.hpp"
#include "karina/layers.hpp"
#include "karina/model.hpp"
#include "karina/data.hpp"
#include "karina/training.hpp"
#include "karina/metrics.hpp"
#include "karina/rollout.hpp"
