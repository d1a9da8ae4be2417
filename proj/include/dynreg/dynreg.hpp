#pragma once

#include "dynreg/volume.hpp"
#include "dynreg/random.hpp"
#include "dynreg/grid_ops.hpp"
#include "dynreg/regularizers.hpp"
#include "dynreg/pdhgm.hpp"
#include "dynreg/krylov.hpp"
#include "dynreg/adjoint.hpp"
#include "dynreg/metrics.hpp"
#include "dynreg/bilevel.hpp"
#include "dynreg/video_io.hpp"
