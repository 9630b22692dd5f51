#pragma once

#include "ltx/autodiff.hpp"
#include "ltx/concepts.hpp"
#include "ltx/consistency.hpp"
#include "ltx/container.hpp"
#include "ltx/csv.hpp"
#include "ltx/error.hpp"
#include "ltx/gradcam.hpp"
#include "ltx/mask.hpp"
#include "ltx/network.hpp"
#include "ltx/parallel.hpp"
#include "ltx/pcbm.hpp"
#include "ltx/pipeline.hpp"
#include "ltx/pruning.hpp"
#include "ltx/rng.hpp"
#include "ltx/synth.hpp"
#include "ltx/tensor.hpp"
