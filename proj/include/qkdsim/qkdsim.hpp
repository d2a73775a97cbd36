// Umbrella header.
#pragma once

#include "qkdsim/compensation.hpp"
#include "qkdsim/config.hpp"
#include "qkdsim/detectors.hpp"
#include "qkdsim/frame.hpp"
#include "qkdsim/metrics.hpp"
#include "qkdsim/physics.hpp"
#include "qkdsim/protocol.hpp"
#include "qkdsim/rng.hpp"
#include "qkdsim/sifting.hpp"
#include "qkdsim/simulation.hpp"
#include "qkdsim/transport.hpp"
