#pragma once

#include "funcs.hpp"
#include "problem.hpp"
#include "snewton.hpp"
#include "stationarity.hpp"
#include "mm.hpp"
#include "pwa.hpp"
