#pragma once

#include "mudok/rng.hpp"
#include "mudok/tensor.hpp"
#include "mudok/grad_check.hpp"
#include "mudok/optim.hpp"
#include "mudok/kg.hpp"
#include "mudok/features.hpp"
#include "mudok/synthetic.hpp"
#include "mudok/encoder.hpp"
#include "mudok/checkpoint.hpp"
#include "mudok/pretrain.hpp"
#include "mudok/ppt.hpp"
#include "mudok/rec.hpp"
#include "mudok/text.hpp"
#include "mudok/report.hpp"
#include "mudok/experiment.hpp"
