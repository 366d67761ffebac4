#pragma once

#include "annotate.hpp"
#include "assign.hpp"
#include "benchmark.hpp"
#include "box.hpp"
#include "defaults.hpp"
#include "error.hpp"
#include "eval.hpp"
#include "hsicube.hpp"
#include "htd.hpp"
#include "kernel_check.hpp"
#include "kernels.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "scenesynth.hpp"
#include "specmodel.hpp"
