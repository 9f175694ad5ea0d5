#pragma once

#include "epiptrack/autograd.hpp"
#include "epiptrack/nn.hpp"
#include "epiptrack/image_io.hpp"
#include "epiptrack/datamodel.hpp"
#include "epiptrack/explicit_prompts.hpp"
#include "epiptrack/encoder.hpp"
#include "epiptrack/implicit_prompts.hpp"
#include "epiptrack/prompt_modulator.hpp"
#include "epiptrack/feature_augmentor.hpp"
#include "epiptrack/losses.hpp"
#include "epiptrack/model.hpp"
#include "epiptrack/checkpoint.hpp"
#include "epiptrack/hungarian.hpp"
#include "epiptrack/kalman.hpp"
#include "epiptrack/association.hpp"
#include "epiptrack/evaluation.hpp"
#include "epiptrack/training.hpp"
#include "epiptrack/config.hpp"
#include "epiptrack/cli.hpp"
