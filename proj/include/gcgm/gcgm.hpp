#pragma once

#include "gcgm/error.hpp"
#include "gcgm/linalg.hpp"
#include "gcgm/tree_model.hpp"
#include "gcgm/counts.hpp"
#include "gcgm/sampling.hpp"
#include "gcgm/cgm.hpp"
#include "gcgm/baseline_sampler.hpp"
#include "gcgm/reduction.hpp"
#include "gcgm/moments.hpp"
#include "gcgm/factored.hpp"
#include "gcgm/ep.hpp"
#include "gcgm/birdsim.hpp"
#include "gcgm/learn.hpp"
#include "gcgm/io.hpp"
