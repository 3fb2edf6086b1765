#pragma once

#include "filterstab/bpf.hpp"
#include "filterstab/core.hpp"
#include "filterstab/enkf.hpp"
#include "filterstab/harness.hpp"
#include "filterstab/lorenz96.hpp"
#include "filterstab/measures.hpp"
#include "filterstab/metrics.hpp"
#include "filterstab/parallel.hpp"
#include "filterstab/propagate.hpp"
#include "filterstab/report.hpp"
#include "filterstab/rng.hpp"
#include "filterstab/sinkhorn.hpp"
