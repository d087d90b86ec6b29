#pragma once

#include "nrulab/autodiff.hpp"
#include "nrulab/cells.hpp"
#include "nrulab/checkpoint.hpp"
#include "nrulab/config.hpp"
#include "nrulab/diagnostics.hpp"
#include "nrulab/gradcheck.hpp"
#include "nrulab/init.hpp"
#include "nrulab/metrics.hpp"
#include "nrulab/optim.hpp"
#include "nrulab/tasks.hpp"
#include "nrulab/tensor.hpp"
#include "nrulab/training.hpp"
