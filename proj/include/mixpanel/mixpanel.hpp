#pragma once

#include "mixpanel/comparators.hpp"
#include "mixpanel/core.hpp"
#include "mixpanel/decomp.hpp"
#include "mixpanel/em.hpp"
#include "mixpanel/families.hpp"
#include "mixpanel/inference.hpp"
#include "mixpanel/io.hpp"
#include "mixpanel/model.hpp"
#include "mixpanel/optim.hpp"
#include "mixpanel/parallel.hpp"
#include "mixpanel/sim.hpp"
