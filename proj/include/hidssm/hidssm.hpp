#pragma once

#include "hidssm/blocks.hpp"
#include "hidssm/checkpoint.hpp"
#include "hidssm/data.hpp"
#include "hidssm/errors.hpp"
#include "hidssm/evaluate.hpp"
#include "hidssm/export.hpp"
#include "hidssm/gradcheck.hpp"
#include "hidssm/metrics.hpp"
#include "hidssm/model.hpp"
#include "hidssm/optim.hpp"
#include "hidssm/selfcheck.hpp"
#include "hidssm/ssm_core.hpp"
#include "hidssm/targets.hpp"
#include "hidssm/tensor.hpp"
#include "hidssm/train.hpp"
