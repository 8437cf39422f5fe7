#pragma once

#include "lolab/tensor.hpp"
#include "lolab/rng.hpp"
#include "lolab/tape.hpp"
#include "lolab/hvp.hpp"
#include "lolab/data.hpp"
#include "lolab/optimizee.hpp"
#include "lolab/learned_optimizer.hpp"
#include "lolab/protocol.hpp"
#include "lolab/meta_trainer.hpp"
#include "lolab/probes.hpp"
#include "lolab/config.hpp"
#include "lolab/report.hpp"
#include "lolab/harness.hpp"
