#pragma once

#include "turnwise/rng.hpp"
#include "turnwise/envsim.hpp"
#include "turnwise/policy_model.hpp"
#include "turnwise/implicit_prm.hpp"
#include "turnwise/attribution.hpp"
#include "turnwise/advantage.hpp"
#include "turnwise/ppo.hpp"
#include "turnwise/diagnostics.hpp"
#include "turnwise/config.hpp"
#include "turnwise/trainer.hpp"
#include "turnwise/harness.hpp"
