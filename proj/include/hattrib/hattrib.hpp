#pragma once

#include "hattrib/attribution.hpp"
#include "hattrib/backtest.hpp"
#include "hattrib/csv.hpp"
#include "hattrib/drl_agents.hpp"
#include "hattrib/error.hpp"
#include "hattrib/features.hpp"
#include "hattrib/hindsight_reference.hpp"
#include "hattrib/market_data.hpp"
#include "hattrib/mean_variance.hpp"
#include "hattrib/ml_baselines.hpp"
#include "hattrib/neural_core.hpp"
#include "hattrib/pipeline.hpp"
#include "hattrib/random.hpp"
#include "hattrib/synthetic.hpp"
