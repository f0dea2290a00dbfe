#pragma once

#include "msddm/errors.hpp"
#include "msddm/numerics.hpp"
#include "msddm/core_ddm.hpp"
#include "msddm/conditioned_density.hpp"
#include "msddm/stage.hpp"
#include "msddm/aggregate.hpp"
#include "msddm/ou.hpp"
#include "msddm/montecarlo.hpp"
#include "msddm/reward.hpp"
