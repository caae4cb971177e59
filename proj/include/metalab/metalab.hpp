#pragma once

#include "metalab/active.hpp"
#include "metalab/adaptation.hpp"
#include "metalab/bench.hpp"
#include "metalab/bounds.hpp"
#include "metalab/errors.hpp"
#include "metalab/meta.hpp"
#include "metalab/network.hpp"
#include "metalab/rng.hpp"
#include "metalab/tasks.hpp"
