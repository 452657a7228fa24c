#pragma once

#include "gfv/calibration.hpp"
#include "gfv/checkpoint.hpp"
#include "gfv/dataset.hpp"
#include "gfv/error.hpp"
#include "gfv/evaluation.hpp"
#include "gfv/image_io.hpp"
#include "gfv/imaging.hpp"
#include "gfv/pipeline.hpp"
#include "gfv/network.hpp"
#include "gfv/rng.hpp"
#include "gfv/synthetic.hpp"
#include "gfv/training.hpp"
