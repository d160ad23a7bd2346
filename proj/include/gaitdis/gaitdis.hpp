#pragma once

#include "gaitdis/clip_store.hpp"
#include "gaitdis/engine.hpp"
#include "gaitdis/evalkit.hpp"
#include "gaitdis/layers.hpp"
#include "gaitdis/losses.hpp"
#include "gaitdis/nets.hpp"
#include "gaitdis/pipeline.hpp"
#include "gaitdis/probes.hpp"
#include "gaitdis/synthgait.hpp"
