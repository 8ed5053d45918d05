#pragma once

#include "pfe/binary_io.hpp"
#include "pfe/dataset.hpp"
#include "pfe/estimators.hpp"
#include "pfe/experiments.hpp"
#include "pfe/featuremap.hpp"
#include "pfe/mips_index.hpp"
#include "pfe/numeric.hpp"
#include "pfe/retrieval.hpp"
