#pragma once

#include "campfire/binary_io.hpp"
#include "campfire/checkpoint.hpp"
#include "campfire/config.hpp"
#include "campfire/error.hpp"
#include "campfire/evaluation.hpp"
#include "campfire/json_io.hpp"
#include "campfire/manifest.hpp"
#include "campfire/model.hpp"
#include "campfire/nn.hpp"
#include "campfire/objective.hpp"
#include "campfire/optim.hpp"
#include "campfire/parallel.hpp"
#include "campfire/positions.hpp"
#include "campfire/rng.hpp"
#include "campfire/split.hpp"
#include "campfire/synth.hpp"
#include "campfire/tile.hpp"
#include "campfire/training.hpp"
