#pragma once

#include "egr/error.hpp"
#include "egr/structio.hpp"
#include "egr/featurize.hpp"
#include "egr/autodiff.hpp"
#include "egr/model.hpp"
#include "egr/metrics.hpp"
#include "egr/train.hpp"
#include "egr/report.hpp"
