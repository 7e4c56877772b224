#pragma once

// Everything in one include.

#include "convolt/conformal.hpp"
#include "convolt/error.hpp"
#include "convolt/eval.hpp"
#include "convolt/features.hpp"
#include "convolt/grid.hpp"
#include "convolt/io.hpp"
#include "convolt/parallel.hpp"
#include "convolt/pipeline.hpp"
#include "convolt/records.hpp"
#include "convolt/regression.hpp"
#include "convolt/rng.hpp"
#include "convolt/stats.hpp"
#include "convolt/synth.hpp"
#include "convolt/volumetry.hpp"
