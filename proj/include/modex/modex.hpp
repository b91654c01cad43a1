#pragma once

#include "modex/bounds_lab.hpp"
#include "modex/cayley.hpp"
#include "modex/container.hpp"
#include "modex/errors.hpp"
#include "modex/experiment.hpp"
#include "modex/gptq.hpp"
#include "modex/hadamard.hpp"
#include "modex/model_graph.hpp"
#include "modex/numerics.hpp"
#include "modex/quantizers.hpp"
#include "modex/rng.hpp"
