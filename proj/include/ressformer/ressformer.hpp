#pragma once

#include "bench.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "gradcheck.hpp"
#include "model.hpp"
#include "optimizer.hpp"
#include "tasks.hpp"
#include "train.hpp"
