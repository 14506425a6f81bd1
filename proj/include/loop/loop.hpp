#pragma once

#include "loop/common.hpp"
#include "loop/core.hpp"
#include "loop/forest.hpp"
#include "loop/imputers.hpp"
#include "loop/variance.hpp"
#include "loop/estimator.hpp"
#include "loop/designs.hpp"
#include "loop/oracle.hpp"
#include "loop/simulation.hpp"
