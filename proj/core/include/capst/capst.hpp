#pragma once

#include "capst/backbone.hpp"
#include "capst/capsule.hpp"
#include "capst/checkpoint.hpp"
#include "capst/config.hpp"
#include "capst/data.hpp"
#include "capst/errors.hpp"
#include "capst/eval.hpp"
#include "capst/fusion.hpp"
#include "capst/gradcheck.hpp"
#include "capst/model.hpp"
#include "capst/nn.hpp"
#include "capst/rng.hpp"
#include "capst/tensor.hpp"
#include "capst/train.hpp"
#include "capst/util.hpp"
