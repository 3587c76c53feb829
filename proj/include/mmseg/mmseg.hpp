#pragma once

#include "mmseg/checkpoint.hpp"
#include "mmseg/config.hpp"
#include "mmseg/data.hpp"
#include "mmseg/decoder.hpp"
#include "mmseg/encoder.hpp"
#include "mmseg/error.hpp"
#include "mmseg/evaluation.hpp"
#include "mmseg/fusion.hpp"
#include "mmseg/model.hpp"
#include "mmseg/neck.hpp"
#include "mmseg/numerics.hpp"
#include "mmseg/training.hpp"
