#pragma once

#include "dcshield/types.hpp"
#include "dcshield/mdp.hpp"
#include "dcshield/value_iteration.hpp"
#include "dcshield/delay_model.hpp"
#include "dcshield/dcmdp.hpp"
#include "dcshield/mdp_io.hpp"
#include "dcshield/digest.hpp"
#include "dcshield/shield.hpp"
#include "dcshield/rng.hpp"
#include "dcshield/envs/env_bundle.hpp"
#include "dcshield/sim.hpp"
#include "dcshield/manifest.hpp"
#include "dcshield/teleop.hpp"
