#pragma once

#include "gstop/error.hpp"
#include "gstop/expr.hpp"
#include "gstop/lattice.hpp"
#include "gstop/structure.hpp"
#include "gstop/stopping_rule.hpp"
#include "gstop/bsde.hpp"
#include "gstop/penalize.hpp"
#include "gstop/method.hpp"
#include "gstop/stopping.hpp"
#include "gstop/properties.hpp"
