#pragma once

// Penalized weighted least-squares estimation and variable selection for clustered,
// right-censored accelerated failure time data under stratified sampling.

#include "strataft/correlation.hpp"
#include "strataft/csv.hpp"
#include "strataft/dataset.hpp"
#include "strataft/errors.hpp"
#include "strataft/kaplan_meier.hpp"
#include "strataft/normal.hpp"
#include "strataft/resampling.hpp"
#include "strataft/rng.hpp"
#include "strataft/simulation.hpp"
#include "strataft/solver.hpp"
#include "strataft/thread_pool.hpp"
#include "strataft/tuning.hpp"
